use std::path::{Path, PathBuf};
use std::time::Instant;

use latsep::audio::{read_wav, write_wav, Waveform};
use latsep::codec::{train_codec, CodecConfig, CodecModel, CodecTrainConfig};
use latsep::dataset::{generate_corpus, load_tracks, CorpusConfig, Manifest, ManifestEntry, Split};
use latsep::metrics::{evaluate_track, sdr, MetricConfig, MetricReport, SpectrogramConfig, TrackMetrics};
use latsep::model::SeparationModel;
use latsep::par::derive_seed;
use latsep::pitch::PitchConfig;
use latsep::robustness::{run_table, AqMode, Experiment, RobustnessConfig};
use latsep::sampler::{separate_track, SamplerConfig};
use latsep::trainer::{run_two_stage, state_from_checkpoint, Augmentation, TrainConfig, TrainOutputs, TrainState};
use latsep::checkpoint::Checkpoint;
use latsep::unet::UNetConfig;
use log::info;
use serde_json::{json, Map, Value};

use crate::args::{
    Architecture, EvaluateArgs, GenDataArgs, Preset, RobustnessArgs, SeparateArgs, SplitArg, TrainArgs, TrainCodecArgs,
};
use crate::CliError;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Values `--preset paper` changes for `command`.
pub fn preset_values(preset: Preset, command: &str) -> Map<String, Value> {
    let v = match (preset, command) {
        (Preset::Toy, _) => json!({}),
        (Preset::Paper, "gen-data") => json!({"sample_rate": 44100, "channels": 2, "duration": 10.0}),
        (Preset::Paper, "train-codec") => json!({
            "compression_factor": 320,
            "feature_channels": 128,
            "hidden_channels": 32,
            "rvq_stages": 32,
            "codebook_size": 1024,
            "crop_len": 32000,
        }),
        (Preset::Paper, "train") => json!({"architecture": "paper", "crop_samples": 262144}),
        (Preset::Paper, "separate") => json!({"chunk_samples": 262144}),
        (Preset::Paper, "evaluate") => json!({"fft_size": 2048, "hop": 512, "mel_bands": 128}),
        (Preset::Paper, _) => json!({}),
    };
    match v {
        Value::Object(m) => m,
        _ => unreachable!(),
    }
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Valid => Split::Valid,
    }
}

fn load_manifest(dir: &Path) -> Result<Manifest, CliError> {
    Ok(Manifest::load(dir.join(Manifest::FILE_NAME))?)
}

fn split_entries(m: &Manifest, split: Split) -> Vec<ManifestEntry> {
    m.split(split).cloned().collect()
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).map_err(|e| latsep::Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

pub fn gen_data(a: &GenDataArgs) -> Result<Value, CliError> {
    let cfg = CorpusConfig {
        tracks: a.tracks,
        seed: a.common.seed,
        duration_s: a.duration,
        sample_rate: a.sample_rate,
        channels: a.channels,
    };
    if a.tracks == 0 {
        return Err(usage("--tracks must be positive"));
    }
    if a.duration.is_nan() || a.duration <= 0.0 {
        return Err(usage("--duration must be positive"));
    }
    if !(1..=2).contains(&a.channels) {
        return Err(usage("--channels must be 1 or 2"));
    }
    let m = generate_corpus(&cfg, &a.out)?;
    Ok(json!({
        "out": a.out,
        "tracks": m.tracks.len(),
        "train": m.split(Split::Train).count(),
        "valid": m.split(Split::Valid).count(),
        "sample_rate": m.sample_rate,
    }))
}

pub fn train_codec_cmd(a: &TrainCodecArgs) -> Result<Value, CliError> {
    let manifest = load_manifest(&a.data)?;
    let config = CodecConfig {
        audio_channels: 1,
        compression_factor: a.compression_factor,
        feature_channels: a.feature_channels,
        rvq_stages: a.rvq_stages,
        codebook_size: a.codebook_size,
        sample_rate: manifest.sample_rate,
        hidden_channels: a.hidden_channels,
    };
    let train_cfg = CodecTrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        crop_len: a.crop_len,
        lr: a.lr,
        seed: a.common.seed,
        kmeans_iters: a.kmeans_iters,
        kmeans_max_vectors: a.kmeans_max_vectors,
        ..CodecTrainConfig::default()
    };
    let train = load_tracks(&a.data, manifest.split(Split::Train))?;
    let valid = load_tracks(&a.data, manifest.split(Split::Valid))?;
    let channels = train.first().map_or(1, |t| t.vocals.num_channels());
    let config = CodecConfig {
        audio_channels: channels,
        ..config
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let clips: Vec<Waveform> = train
        .iter()
        .flat_map(|t| [t.vocals.clone(), t.accompaniment.clone(), t.mixture.clone()])
        .collect();
    let (codec, report) = train_codec(&clips, &config, &train_cfg)?;
    ensure_parent(&a.out)?;
    codec.save(&a.out)?;
    let mut held_out = Map::new();
    if !valid.is_empty() {
        for quantized in [false, true] {
            if quantized && !codec.quantization_enabled() {
                continue;
            }
            let mut total = 0.0;
            for t in &valid {
                total += sdr(&t.mixture, &codec.reconstruct(&t.mixture, quantized)?)?;
            }
            let key = if quantized { "quantized_sdr_db" } else { "sdr_db" };
            held_out.insert(key.into(), json!(total / valid.len() as f64));
        }
    }
    Ok(json!({
        "out": a.out,
        "parameters": codec.num_parameters(),
        "clips": clips.len(),
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
        "epoch_losses": report.epoch_losses,
        "latent_scale": report.latent_scale,
        "held_out": held_out,
    }))
}

pub fn parse_augmentations(names: &[String]) -> Result<Vec<Augmentation>, CliError> {
    let mut out = Vec::new();
    for n in names.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        if n == "none" {
            continue;
        }
        let aug: Augmentation = serde_json::from_value(Value::String(n.to_string()))
            .map_err(|_| usage(format!("unknown augmentation \"{n}\"")))?;
        out.push(aug);
    }
    Ok(out)
}

pub fn train_config(a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let cfg = TrainConfig {
        stage1_steps: a.stage1_steps,
        stage2_steps: a.stage2_steps,
        lr_stage1: a.lr_stage1,
        lr_stage2: a.lr_stage2,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        grad_accum: a.grad_accum,
        seed: a.common.seed,
        augmentations: parse_augmentations(&a.augmentations)?.into_iter().collect(),
        crop_samples: a.crop_samples,
        num_steps: a.steps,
        valid_examples: a.valid_examples,
        valid_every: a.valid_every,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> Result<Value, CliError> {
    let cfg = train_config(a)?;
    let codec = CodecModel::load(&a.codec)?;
    let manifest = load_manifest(&a.data)?;
    let train = load_tracks(&a.data, manifest.split(Split::Train))?;
    let valid = load_tracks(&a.data, manifest.split(Split::Valid))?;
    let f = codec.config.feature_channels;
    let (mut model, mut state) = match &a.resume {
        Some(path) => {
            let (m, s) = state_from_checkpoint(&Checkpoint::load(path)?, &codec)?;
            info!("resuming from {} at step {}", path.display(), s.step);
            (m, s)
        }
        None => {
            let mut unet = match a.architecture {
                Architecture::Toy => UNetConfig::toy(f),
                Architecture::Paper => UNetConfig {
                    latent_channels: f,
                    ..UNetConfig::paper()
                },
            };
            if let Some(b) = a.base_channels {
                unet.base_channels = b;
            }
            unet.validate().map_err(|e| usage(e.to_string()))?;
            let m = SeparationModel::new(&codec, unet, a.common.seed)?;
            let s = TrainState::new(&m, cfg.weight_decay);
            (m, s)
        }
    };
    let log_csv = a.log_csv.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let checkpoint_dir = a.checkpoint_dir.clone().unwrap_or_else(|| {
        a.out
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    });
    ensure_parent(&a.out)?;
    ensure_parent(&log_csv)?;
    if a.resume.is_none() && log_csv.exists() {
        std::fs::remove_file(&log_csv).map_err(|e| latsep::Error::Io {
            path: log_csv.clone(),
            source: e,
        })?;
    }
    let outputs = TrainOutputs {
        metrics_csv: Some(log_csv.clone()),
        checkpoint_dir: Some(checkpoint_dir.clone()),
    };
    let report = run_two_stage(&cfg, &codec, &mut model, &mut state, &train, &valid, &outputs, None)?;
    model.save(&a.out)?;
    Ok(json!({
        "out": a.out,
        "log_csv": log_csv,
        "checkpoint_dir": checkpoint_dir,
        "parameters": model.count_parameters(),
        "steps": report.steps,
        "steps_this_run": report.losses.len(),
        "final_train_loss": report.final_train_loss,
        "stage1_valid_loss": report.stage1_valid_loss,
        "stage2_valid_loss": report.stage2_valid_loss,
    }))
}

fn sampler_config(a: &SeparateArgs, seed: u64) -> Result<SamplerConfig, CliError> {
    if a.steps == 0 {
        return Err(usage("--steps must be positive"));
    }
    if !(0.0..0.5).contains(&a.overlap) {
        return Err(usage("--overlap must be in [0, 0.5)"));
    }
    Ok(SamplerConfig {
        num_steps: a.steps,
        seed,
        chunk_samples: a.chunk_samples,
        overlap_fraction: a.overlap,
    })
}

pub fn separate(a: &SeparateArgs) -> Result<Value, CliError> {
    sampler_config(a, 0)?;
    let jobs: Vec<(String, PathBuf, PathBuf)> = match (&a.input, &a.data) {
        (Some(input), None) => vec![("input".into(), input.clone(), a.out.clone())],
        (None, Some(dir)) => {
            let m = load_manifest(dir)?;
            split_entries(&m, split_of(a.split))
                .into_iter()
                .map(|e| (e.id.clone(), dir.join(&e.mixture), a.out.join(format!("{}.wav", e.id))))
                .collect()
        }
        _ => return Err(usage("give exactly one of --in or --data")),
    };
    let codec = CodecModel::load(&a.codec)?;
    let model = SeparationModel::load(&a.model, &codec)?;
    let mut cfg = sampler_config(a, a.common.seed)?;
    cfg.validate(codec.config.compression_factor).map_err(|e| usage(e.to_string()))?;
    let mut files = Vec::new();
    let mut total_samples = 0usize;
    let start = Instant::now();
    for (k, (id, input, output)) in jobs.iter().enumerate() {
        let mixture = read_wav(input)?;
        if mixture.sample_rate != codec.config.sample_rate {
            return Err(latsep::Error::invalid(format!(
                "{} is {} Hz but the codec runs at {} Hz",
                input.display(),
                mixture.sample_rate,
                codec.config.sample_rate
            ))
            .into());
        }
        cfg.seed = if a.input.is_some() { a.common.seed } else { derive_seed(a.common.seed, k as u64) };
        let vocals = separate_track(&model, &codec, &mixture, &cfg)?;
        ensure_parent(output)?;
        write_wav(output, &vocals)?;
        total_samples += vocals.len();
        info!("separated {id} ({} samples)", vocals.len());
        files.push(json!({"track": id, "input": input, "output": output, "samples": vocals.len()}));
    }
    Ok(json!({
        "files": files,
        "total_samples": total_samples,
        "num_steps": cfg.num_steps,
        "overlap": cfg.overlap_fraction,
        "elapsed_s": start.elapsed().as_secs_f64(),
    }))
}

fn metric_config(a: &EvaluateArgs, sample_rate: u32) -> Result<MetricConfig, CliError> {
    let cfg = MetricConfig {
        spectrogram: SpectrogramConfig {
            fft_size: a.fft_size,
            hop: a.hop,
            mel_bands: a.mel_bands,
            ..SpectrogramConfig::default()
        },
        pitch: PitchConfig {
            threshold: a.pitch_threshold,
            frame_len: a.fft_size,
            hop: a.hop,
            ..PitchConfig::default()
        },
    };
    cfg.spectrogram.validate(sample_rate).map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn wins(est: &TrackMetrics, mix: &TrackMetrics) -> (bool, bool) {
    let mel = matches!((est.mel_mae, mix.mel_mae), (Some(e), Some(m)) if e < m);
    // An undefined mixture score counts as worst possible.
    let f0 = match (est.logf0_rmse, mix.logf0_rmse) {
        (Some(e), Some(m)) => e < m,
        (Some(_), None) => true,
        (None, _) => false,
    };
    (mel, f0)
}

pub fn evaluate(a: &EvaluateArgs) -> Result<Value, CliError> {
    let manifest = load_manifest(&a.data)?;
    let cfg = metric_config(a, manifest.sample_rate)?;
    let entries = split_entries(&manifest, split_of(a.split));
    if entries.is_empty() {
        return Err(latsep::Error::invalid("no tracks in the requested split").into());
    }
    let mut report = MetricReport::default();
    let mut baseline = MetricReport::default();
    for e in &entries {
        let reference = read_wav(a.data.join(&e.vocals))?;
        let estimate = read_wav(a.estimates.join(format!("{}.wav", e.id)))?;
        report.tracks.push(evaluate_track(&e.id, &reference, &estimate, &cfg)?);
        if a.baseline {
            let mixture = read_wav(a.data.join(&e.mixture))?;
            baseline.tracks.push(evaluate_track(&e.id, &reference, &mixture, &cfg)?);
        }
    }
    ensure_parent(&a.out)?;
    let json_path = a.out.with_extension("json");
    report.write(&a.out, &json_path)?;
    let mut summary = json!({
        "out_csv": a.out,
        "out_json": json_path,
        "tracks": report.tracks.len(),
        "mean": report.aggregate(),
    });
    if a.baseline {
        let stem = a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
        let base_csv = a.out.with_file_name(format!("{stem}_mixture.csv"));
        baseline.write(&base_csv, base_csv.with_extension("json"))?;
        let (mut mel, mut f0) = (0, 0);
        for (e, m) in report.tracks.iter().zip(&baseline.tracks) {
            let (a, b) = wins(e, m);
            mel += a as usize;
            f0 += b as usize;
        }
        summary["baseline"] = json!({
            "out_csv": base_csv,
            "mean": baseline.aggregate(),
            "mel_mae_wins": mel,
            "logf0_rmse_wins": f0,
        });
    }
    Ok(summary)
}

pub fn robustness(a: &RobustnessArgs) -> Result<Value, CliError> {
    let experiments = a
        .experiments
        .iter()
        .map(|s| Experiment::parse(s.trim()))
        .collect::<latsep::Result<Vec<_>>>()
        .map_err(|e| usage(e.to_string()))?;
    let cfg = RobustnessConfig {
        noise_stds: a.stds.clone(),
        experiments,
        seed: a.common.seed,
        aq_mode: AqMode::parse(&a.aq_mode).map_err(|e| usage(e.to_string()))?,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let codec = CodecModel::load(&a.codec)?;
    let manifest = load_manifest(&a.data)?;
    let clips: Vec<Waveform> = load_tracks(&a.data, manifest.split(split_of(a.split)))?
        .into_iter()
        .map(|t| t.mixture)
        .collect();
    let report = run_table(&cfg, &codec, &clips)?;
    ensure_parent(&a.out)?;
    let json_path = a.out.with_extension("json");
    report.write(&a.out, &json_path)?;
    let grid: Map<String, Value> = report
        .experiments
        .iter()
        .zip(&report.grid)
        .map(|(e, row)| (e.label().to_string(), json!(row)))
        .collect();
    Ok(json!({
        "out_csv": a.out,
        "out_json": json_path,
        "clips": clips.len(),
        "noise_stds": report.noise_stds,
        "mean_sdr_db": grid,
        "feature_sizes": report.feature_sizes,
    }))
}
