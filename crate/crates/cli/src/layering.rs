//! Settings precedence: defaults < preset < config file < env < flags.

use std::path::Path;

use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Keys that only make sense on the command line.
const NOT_IN_FILES: [&str; 3] = ["config", "preset", "summary"];

pub const SUBCOMMANDS: [&str; 6] = ["gen-data", "train-codec", "train", "separate", "evaluate", "robustness"];

/// Reads the part of a config file that applies to `command`: the object
/// under the command's name when present, else the top level minus other
/// commands' sections.
pub fn read_config(path: &Path, command: &str) -> Result<Map<String, Value>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| format!("config {} is not valid JSON: {e}", path.display()))?;
    let Value::Object(mut top) = value else {
        return Err(format!("config {} must be a JSON object", path.display()));
    };
    let section = top.remove(command);
    for other in SUBCOMMANDS {
        top.remove(other);
    }
    match section {
        Some(Value::Object(s)) => {
            // Top-level keys act as shared defaults for every section.
            let mut merged = top;
            merged.extend(s);
            Ok(merged)
        }
        Some(_) => Err(format!("config section \"{command}\" must be an object")),
        None => Ok(top),
    }
}

/// Rebuilds `parsed` with every value that came from a clap default
/// replaced by the config file's value, or else the preset's.
pub fn layer<T: Serialize + DeserializeOwned>(
    parsed: &T,
    matches: &ArgMatches,
    file: &Map<String, Value>,
    preset: &Map<String, Value>,
) -> Result<T, String> {
    let Value::Object(mut obj) = serde_json::to_value(parsed).map_err(|e| e.to_string())? else {
        unreachable!("argument structs serialize to objects")
    };
    for key in file.keys() {
        if !obj.contains_key(key) || NOT_IN_FILES.contains(&key.as_str()) {
            return Err(format!("unknown config key \"{key}\""));
        }
    }
    for (key, value) in obj.iter_mut() {
        let explicit = matches!(
            matches.value_source(key),
            Some(ValueSource::CommandLine | ValueSource::EnvVariable)
        );
        if explicit {
            continue;
        }
        if let Some(v) = file.get(key).or_else(|| preset.get(key)) {
            *value = v.clone();
        }
    }
    serde_json::from_value(Value::Object(obj)).map_err(|e| format!("invalid configuration: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::args::Cli;
    use clap::{CommandFactory, FromArgMatches};

    fn parse(argv: &[&str]) -> (crate::args::TrainArgs, ArgMatches) {
        let m = Cli::command().try_get_matches_from(argv).unwrap();
        let cli = Cli::from_arg_matches(&m).unwrap();
        let crate::args::Command::Train(a) = cli.command else { panic!() };
        (a, m.subcommand_matches("train").unwrap().clone())
    }

    #[test]
    fn precedence() {
        let (a, m) = parse(&["latsep", "train", "--lr-stage1", "0.5"]);
        let file: Map<String, Value> = serde_json::from_str(r#"{"lr_stage1": 0.1, "batch_size": 3, "steps": 7}"#).unwrap();
        let preset: Map<String, Value> = serde_json::from_str(r#"{"batch_size": 99, "stage1_steps": 11}"#).unwrap();
        let out = layer(&a, &m, &file, &preset).unwrap();
        assert_eq!(out.lr_stage1, 0.5);
        assert_eq!(out.batch_size, 3);
        assert_eq!(out.steps, 7);
        assert_eq!(out.stage1_steps, 11);
        assert_eq!(out.stage2_steps, 2000);
        let bad: Map<String, Value> = serde_json::from_str(r#"{"lr_stag1": 0.1}"#).unwrap();
        assert!(layer(&a, &m, &bad, &Map::new()).is_err());
    }
}
