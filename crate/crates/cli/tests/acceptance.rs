//! Release gate. Each criterion prints one PASS/FAIL line; the target exits
//! non-zero if any criterion fails. Criteria 4, 5, 7 and 9 share one trained toy system.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use latsep::audio::Waveform;
use latsep::codec::{train_codec, CodecConfig, CodecModel, CodecTrainConfig};
use latsep::dataset::{assign_splits, generate_stems, CorpusConfig, Split, StemSet};
use latsep::diffusion::{alpha_beta_at, forward_diffuse, standard_normal, NoiseSchedule};
use latsep::gradcheck::{check_generator, BLOCK_KINDS};
use latsep::metrics::{evaluate_track, logf0_rmse, lsd, sdr, MetricConfig, SpectrogramConfig};
use latsep::model::SeparationModel;
use latsep::pitch::{track_pitch, PitchConfig, PitchTrack};
use latsep::robustness::{run_table, Experiment, RobustnessConfig};
use latsep::sampler::{sample, seam_ratio, separate_track, weight_sum, OracleVelocity, SamplerConfig};
use latsep::tensor::Tensor;
use latsep::trainer::{run_two_stage, TrainConfig, TrainOutputs, TrainState};
use latsep::unet::{GeneratorModel, UNetConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use sha2::{Digest, Sha256};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn oracle_recovery() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for t in [1, 5, 50] {
        for seed in 0..8u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let target = standard_normal(8, 64, &mut rng);
            let cond = standard_normal(8, 64, &mut rng);
            let schedule = NoiseSchedule::new(t).unwrap();
            let out = sample(&OracleVelocity { target: target.clone() }, &cond, &schedule, seed * 31 + 1).unwrap();
            worst = worst.max(out.max_abs_diff(&target));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-6 && secs < 1.0, format!("max error {worst:.2e}, {secs:.3} s"))
}

fn trig_identities() -> Outcome {
    let schedule = NoiseSchedule::new(10_000).unwrap();
    let worst = (0..=10_000)
        .map(|t| {
            let (a, b) = schedule.alpha_beta(t).unwrap();
            (a * a + b * b - 1.0).abs()
        })
        .fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = standard_normal(4, 32, &mut rng);
    let eps = standard_normal(4, 32, &mut rng);
    let s = NoiseSchedule::new(50).unwrap();
    let ends = forward_diffuse(&x0, &eps, &s, 0).unwrap() == x0 && forward_diffuse(&x0, &eps, &s, 50).unwrap() == eps;
    let corners = alpha_beta_at(0.0) == (1.0, 0.0) && alpha_beta_at(1.0).1 == 1.0;
    outcome(worst <= 1e-12 && ends && corners, format!("max |α²+β²−1| {worst:.1e}, endpoints exact: {ends}"))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let cfg = UNetConfig {
        base_channels: 8,
        groups: 4,
        fourier_features: 4,
        time_embed_channels: 8,
        ..UNetConfig::toy(4)
    };
    let m = GeneratorModel::new(cfg, 3).unwrap();
    let wave = |salt: f64| Tensor::from_fn(4, 16, |r, c| ((r * 16 + c) as f64 * 1.37 + salt).sin() * 0.8 + 0.05 * r as f64);
    let checks = check_generator(&m, &wave(0.1), 0.41, &wave(2.3), &wave(4.7), 2, 1e-5, 5).unwrap();
    let kinds: std::collections::BTreeSet<_> = checks.iter().map(|c| c.kind).collect();
    let worst = checks.iter().map(|c| c.rel_error()).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        checks.len() >= 20 && kinds.len() == BLOCK_KINDS.len() && worst < 1e-3 && secs < 30.0,
        format!(
            "{} parameters over {}/{} block types, worst relative error {worst:.1e}, {secs:.1} s",
            checks.len(),
            kinds.len(),
            BLOCK_KINDS.len()
        ),
    )
}

fn metric_closed_forms() -> Outcome {
    let sr = 8000;
    let sine = |f: f64, n: usize| Waveform::mono(sr, (0..n).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / sr as f64).sin() * 0.5).collect());
    let x = sine(300.0, 8000);
    let s = sdr(&x, &x.map(|v| 0.5 * v)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Waveform::from_tensor(sr, &standard_normal(1, 4000, &mut rng));
    let l = lsd(&noise, &noise.map(|v| 10.0 * v), &SpectrogramConfig::default()).unwrap();
    let track = |f: f64| PitchTrack {
        f0_hz: vec![f; 10],
        voiced: vec![true; 10],
        hop_secs: 0.032,
    };
    let o = logf0_rmse(&track(440.0), &track(880.0)).unwrap();
    let p = track_pitch(&sine(440.0, 8000), &PitchConfig::default()).unwrap().median_voiced_f0().unwrap_or(0.0);
    outcome(
        (s - 6.0206).abs() <= 1e-3 && (l - 1.0).abs() <= 1e-6 && (o - std::f64::consts::LN_2).abs() <= 1e-3 && (p / 440.0 - 1.0).abs() <= 0.01,
        format!("sdr {s:.4} dB, lsd {l:.7}, octave {o:.4}, pitch {p:.2} Hz"),
    )
}

/// Toy codec and model trained on the 200-track corpus, plus the held-out set.
struct Trained {
    codec: CodecModel,
    model: SeparationModel,
    held_out: Vec<StemSet>,
    train_secs: f64,
}

fn train_toy() -> Trained {
    let start = Instant::now();
    let corpus = CorpusConfig::default();
    let stems = generate_stems(&corpus).unwrap();
    let splits = assign_splits(stems.len(), corpus.seed);
    let (mut train, mut held_out) = (Vec::new(), Vec::new());
    for ((_, s), split) in stems.into_iter().zip(splits) {
        match split {
            Split::Train => train.push(s),
            Split::Valid => held_out.push(s),
        }
    }
    let clips: Vec<Waveform> = train
        .iter()
        .flat_map(|t| [t.vocals.clone(), t.accompaniment.clone(), t.mixture.clone()])
        .collect();
    let codec_cfg = CodecTrainConfig {
        epochs: 10,
        ..CodecTrainConfig::default()
    };
    let (codec, _) = train_codec(&clips, &CodecConfig::default(), &codec_cfg).unwrap();
    let unet = UNetConfig {
        base_channels: 16,
        ..UNetConfig::toy(codec.config.feature_channels)
    };
    let mut model = SeparationModel::new(&codec, unet, 1).unwrap();
    let cfg = TrainConfig {
        stage1_steps: 1400,
        stage2_steps: 600,
        lr_stage1: 2e-3,
        lr_stage2: 5e-4,
        batch_size: 8,
        crop_samples: 8192,
        valid_examples: 8,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&model, cfg.weight_decay);
    run_two_stage(&cfg, &codec, &mut model, &mut state, &train, &held_out, &TrainOutputs::default(), None).unwrap();
    Trained {
        codec,
        model,
        held_out,
        train_secs: start.elapsed().as_secs_f64(),
    }
}

fn learning_signal(t: &Trained, separated: &[Waveform]) -> Outcome {
    let mc = MetricConfig::default();
    let (mut mel, mut f0) = (0, 0);
    for (s, est) in t.held_out.iter().zip(separated) {
        let a = evaluate_track("estimate", &s.vocals, est, &mc).unwrap();
        let b = evaluate_track("mixture", &s.vocals, &s.mixture, &mc).unwrap();
        mel += matches!((a.mel_mae, b.mel_mae), (Some(x), Some(y)) if x < y) as usize;
        f0 += match (a.logf0_rmse, b.logf0_rmse) {
            (Some(x), Some(y)) => x < y,
            (Some(_), None) => true,
            (None, _) => false,
        } as usize;
    }
    let n = t.held_out.len();
    let need = (0.8 * n as f64).ceil() as usize;
    outcome(
        n == 20 && mel >= need && f0 >= need && t.train_secs < 1800.0,
        format!("Mel-MAE wins {mel}/{n}, log-F0 RMSE wins {f0}/{n}, trained in {:.0} s", t.train_secs),
    )
}

fn robustness_trends(t: &Trained) -> Outcome {
    let start = Instant::now();
    let clips: Vec<Waveform> = t.held_out.iter().map(|s| s.mixture.clone()).collect();
    let r = run_table(&RobustnessConfig::default(), &t.codec, &clips).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let curve = |e| r.curve(e).unwrap();
    let (nq, bq, aq) = (curve(Experiment::Nq), curve(Experiment::Bq), curve(Experiment::Aq));
    let monotone = Experiment::ALL.iter().all(|&e| curve(e).windows(2).all(|w| w[1] <= w[0] + 0.3));
    let ordering = nq[0] > bq[0] && bq[0] == aq[0];
    let sensitive = (1..r.noise_stds.len()).find(|&i| aq[0] - aq[i] > 1.0 && nq[0] - nq[i] <= 0.5 && bq[0] - bq[i] <= 0.5);
    outcome(
        monotone && ordering && sensitive.is_some() && secs < 600.0,
        format!(
            "monotone {monotone}; NQ(0) {:.2} > BQ(0) {:.2} = AQ(0) {:.2}; AQ-only drop at std {}; {secs:.1} s",
            nq[0],
            bq[0],
            aq[0],
            sensitive.map_or("none".into(), |i| r.noise_stds[i].to_string())
        ),
    )
}

fn chunk_consistency(t: &Trained, separated: &[Waveform], cfg: &SamplerConfig) -> Outcome {
    let mut worst_w = 0.0f64;
    for len in [1, 100, 8191, 8192, 8193, 24000, 96000] {
        for overlap in [0.0, 0.2, 0.45] {
            let c = SamplerConfig {
                overlap_fraction: overlap,
                ..cfg.clone()
            };
            worst_w = weight_sum(len, &c).iter().map(|w| (w - 1.0).abs()).fold(worst_w, f64::max);
        }
    }
    let ratios: Vec<f64> = separated.iter().filter_map(|w| seam_ratio(w, cfg, 256)).collect();
    let mean = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
    let worst = ratios.iter().copied().fold(0.0, f64::max);
    outcome(
        worst_w <= 1e-9 && ratios.len() == t.held_out.len() && mean < 3.0,
        format!("weight error {worst_w:.1e}; seam ratio mean {mean:.2}, max {worst:.2} over {} tracks", ratios.len()),
    )
}

fn efficiency(t: &Trained) -> Outcome {
    let sr = t.codec.config.sample_rate;
    let clip = Waveform::mono(sr, t.held_out.iter().take(4).flat_map(|s| s.mixture.downmix()).collect());
    let run = |steps: usize| {
        let cfg = SamplerConfig {
            num_steps: steps,
            ..SamplerConfig::default()
        };
        let start = Instant::now();
        separate_track(&t.model, &t.codec, &clip, &cfg).unwrap();
        start.elapsed().as_secs_f64()
    };
    let t50 = run(50);
    let points: Vec<(f64, f64)> = [10, 25, 50, 100]
        .iter()
        .map(|&s| (s as f64, (0..3).map(|_| run(s)).fold(f64::INFINITY, f64::min)))
        .collect();
    let n = points.len() as f64;
    let (mx, my) = (points.iter().map(|p| p.0).sum::<f64>() / n, points.iter().map(|p| p.1).sum::<f64>() / n);
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r2 = sxy * sxy / (sxx * syy);
    outcome(
        clip.duration_secs() >= 12.0 && t50 < 60.0 && r2 > 0.99,
        format!("{:.0} s clip at T=50 in {t50:.2} s; R² {r2:.5} over T ∈ {{10,25,50,100}}", clip.duration_secs()),
    )
}

fn hash_tree(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let digest = Sha256::digest(std::fs::read(&path).unwrap());
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, digest.iter().map(|b| format!("{b:02x}")).collect());
            }
        }
    }
    out
}

fn strip_timings(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.remove("elapsed_s");
            m.values_mut().for_each(strip_timings);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_timings),
        _ => {}
    }
}

const PIPELINE: [&[&str]; 6] = [
    &["gen-data", "--out", "data", "--tracks", "10", "--duration", "1.0"],
    &[
        "train-codec", "--data", "data", "--out", "codec.ckpt", "--epochs", "2", "--batch-size", "4", "--crop-len", "2048",
        "--compression-factor", "16", "--feature-channels", "4", "--hidden-channels", "8", "--rvq-stages", "2",
        "--codebook-size", "16", "--kmeans-iters", "3",
    ],
    &[
        "train", "--data", "data", "--codec", "codec.ckpt", "--out", "model.ckpt", "--stage1-steps", "3", "--stage2-steps",
        "2", "--batch-size", "2", "--crop-samples", "2048", "--steps", "10", "--base-channels", "8", "--valid-examples", "2",
    ],
    &[
        "separate", "--model", "model.ckpt", "--codec", "codec.ckpt", "--data", "data", "--out", "separated", "--steps", "5",
        "--chunk-samples", "2048",
    ],
    &["evaluate", "--data", "data", "--estimates", "separated", "--baseline", "--out", "metrics.csv"],
    &["robustness", "--codec", "codec.ckpt", "--data", "data", "--out", "robustness.csv"],
];

fn run_pipeline(dir: &Path) -> Result<(Vec<Value>, BTreeMap<String, String>), String> {
    let mut summaries = Vec::new();
    for args in PIPELINE {
        let out = Command::new(env!("CARGO_BIN_EXE_latsep"))
            .args(args.iter().copied())
            .args(["--seed", "5", "--threads", "1"])
            .current_dir(dir)
            .env("LATSEP_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
        let mut v: Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
        strip_timings(&mut v);
        summaries.push(v);
    }
    Ok((summaries, hash_tree(dir)))
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    match (run_pipeline(a.path()), run_pipeline(b.path())) {
        (Ok((sa, ha)), Ok((sb, hb))) => {
            let same_files = ha == hb;
            let same_summaries = sa == sb;
            outcome(
                same_files && same_summaries && ha.len() > 20,
                format!("{} commands, {} output files; files identical {same_files}, summaries identical {same_summaries}", PIPELINE.len(), ha.len()),
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "oracle sampling recovers the target latent", oracle_recovery()),
        (2, "schedule trig identities and diffusion endpoints", trig_identities()),
        (3, "generator gradients match finite differences", gradients()),
        (6, "metric closed forms", metric_closed_forms()),
        (8, "CLI commands are bit-reproducible", determinism()),
    ];
    let trained = train_toy();
    let sampler = SamplerConfig::default();
    let separated: Vec<Waveform> = trained
        .held_out
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let cfg = SamplerConfig {
                seed: k as u64,
                ..sampler.clone()
            };
            separate_track(&trained.model, &trained.codec, &s.mixture, &cfg).unwrap()
        })
        .collect();
    results.push((4, "separation beats the mixture on held-out tracks", learning_signal(&trained, &separated)));
    results.push((5, "robustness table trends", robustness_trends(&trained)));
    results.push((7, "chunked inference is seamless", chunk_consistency(&trained, &separated, &sampler)));
    results.push((9, "inference cost", efficiency(&trained)));
    results.sort_by_key(|r| r.0);
    for (n, name, o) in &results {
        println!("{} criterion {n} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
    println!("all {} criteria passed", results.len());
}
