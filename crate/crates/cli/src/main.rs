//! `latsep` command-line entry point.
//!
//! Exit codes: 0 success, 1 invalid arguments or configuration, 2 runtime
//! or data error. Every run prints a JSON summary on stdout.

mod args;
mod commands;
mod layering;

use std::process::ExitCode;

use clap::{ArgMatches, CommandFactory, FromArgMatches};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use args::{Cli, Command, Common};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] latsep::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn resolve<T: Serialize + DeserializeOwned>(
    parsed: &T,
    common: &Common,
    name: &str,
    matches: &ArgMatches,
) -> Result<T, CliError> {
    let file = match &common.config {
        Some(p) => layering::read_config(p, name).map_err(CliError::Usage)?,
        None => Map::new(),
    };
    let preset = commands::preset_values(common.preset, name);
    layering::layer(parsed, matches, &file, &preset).map_err(CliError::Usage)
}

/// Resolves the layered configuration, then runs the command on a pool of
/// the requested size. Returns `(resolved config, results)`.
fn dispatch(command: Command, matches: &ArgMatches) -> Result<(Value, Common, Value), CliError> {
    macro_rules! run {
        ($a:expr, $f:path) => {{
            let a = resolve($a, &$a.common, command.name(), matches)?;
            let cfg = serde_json::to_value(&a).expect("arguments serialize");
            let common = a.common.clone();
            let out = latsep::par::with_threads(common.threads, || $f(&a))?;
            Ok((cfg, common, out))
        }};
    }
    match &command {
        Command::GenData(a) => run!(a, commands::gen_data),
        Command::TrainCodec(a) => run!(a, commands::train_codec_cmd),
        Command::Train(a) => run!(a, commands::train),
        Command::Separate(a) => run!(a, commands::separate),
        Command::Evaluate(a) => run!(a, commands::evaluate),
        Command::Robustness(a) => run!(a, commands::robustness),
    }
}

fn emit(summary: &Value, path: Option<&std::path::Path>) {
    let text = serde_json::to_string_pretty(summary).expect("summary serializes");
    println!("{text}");
    if let Some(p) = path {
        if let Err(e) = std::fs::write(p, &text) {
            log::error!("could not write summary to {}: {e}", p.display());
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LATSEP_LOG", "info").write_style("LATSEP_LOG_STYLE"))
        .format_timestamp(None)
        .init();
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            if code != 0 {
                emit(&json!({"status": "error", "exit_code": code, "error": e.kind().to_string()}), None);
            }
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let name = cli.command.name();
    let sub = matches.subcommand_matches(name).expect("subcommand was parsed");
    match dispatch(cli.command, sub) {
        Ok((config, common, results)) => {
            let summary = json!({
                "command": name,
                "status": "ok",
                "exit_code": 0,
                "seed": common.seed,
                "threads": common.threads,
                "preset": common.preset,
                "config": config,
                "results": results,
            });
            emit(&summary, common.summary.as_deref());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.exit_code();
            log::error!("{e}");
            emit(&json!({"command": name, "status": "error", "exit_code": code, "error": e.to_string()}), None);
            ExitCode::from(code)
        }
    }
}
