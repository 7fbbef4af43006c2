//! Tiny end-to-end runs through the library API.

use latsep::audio::{read_wav, write_wav, Waveform};
use latsep::codec::{train_codec, CodecConfig, CodecModel, CodecTrainConfig};
use latsep::dataset::{generate_corpus, load_tracks, CorpusConfig, Manifest, Split, StemSet};
use latsep::metrics::{evaluate_track, MetricConfig, MetricReport};
use latsep::model::SeparationModel;
use latsep::par;
use latsep::robustness::{run_table, Experiment, RobustnessConfig};
use latsep::sampler::{separate_track, SamplerConfig};
use latsep::trainer::{run_two_stage, TrainConfig, TrainOutputs, TrainState};
use latsep::unet::UNetConfig;

fn corpus(dir: &std::path::Path) -> (Vec<StemSet>, Vec<StemSet>) {
    let cfg = CorpusConfig {
        tracks: 10,
        duration_s: 1.0,
        ..CorpusConfig::default()
    };
    let m = generate_corpus(&cfg, dir).unwrap();
    let again = Manifest::load(dir.join(Manifest::FILE_NAME)).unwrap();
    assert_eq!(m, again);
    (
        load_tracks(dir, m.split(Split::Train)).unwrap(),
        load_tracks(dir, m.split(Split::Valid)).unwrap(),
    )
}

fn small_codec(train: &[StemSet]) -> CodecModel {
    let clips: Vec<Waveform> = train.iter().flat_map(|t| [t.vocals.clone(), t.mixture.clone()]).collect();
    let cfg = CodecConfig {
        compression_factor: 16,
        feature_channels: 4,
        hidden_channels: 8,
        rvq_stages: 2,
        codebook_size: 16,
        ..CodecConfig::default()
    };
    let tcfg = CodecTrainConfig {
        epochs: 2,
        crop_len: 1024,
        kmeans_iters: 4,
        ..CodecTrainConfig::default()
    };
    train_codec(&clips, &cfg, &tcfg).unwrap().0
}

fn small_unet() -> UNetConfig {
    UNetConfig {
        base_channels: 8,
        groups: 4,
        fourier_features: 4,
        time_embed_channels: 16,
        ..UNetConfig::toy(4)
    }
}

fn train_and_separate(train: &[StemSet], valid: &[StemSet], codec: &CodecModel) -> (SeparationModel, Vec<Waveform>) {
    let mut model = SeparationModel::new(codec, small_unet(), 5).unwrap();
    let cfg = TrainConfig {
        stage1_steps: 4,
        stage2_steps: 2,
        lr_stage1: 1e-3,
        lr_stage2: 5e-4,
        batch_size: 3,
        crop_samples: 1024,
        valid_examples: 2,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&model, cfg.weight_decay);
    let report = run_two_stage(&cfg, codec, &mut model, &mut state, train, valid, &TrainOutputs::default(), None).unwrap();
    assert_eq!(report.steps, 6);
    assert!(report.stage1_valid_loss.is_some() && report.stage2_valid_loss.is_some());
    let scfg = SamplerConfig {
        num_steps: 4,
        chunk_samples: 2048,
        ..SamplerConfig::default()
    };
    let seps = valid
        .iter()
        .map(|t| separate_track(&model, codec, &t.mixture, &scfg).unwrap())
        .collect();
    (model, seps)
}

#[test]
fn corpus_codec_training_separation_and_scoring() {
    let dir = tempfile::tempdir().unwrap();
    let (train, valid) = corpus(dir.path());
    assert_eq!(train.len() + valid.len(), 10);
    for t in train.iter().chain(&valid) {
        assert_eq!(t.mixture, t.vocals.add(&t.accompaniment).unwrap());
    }
    let codec = small_codec(&train);
    let ck = dir.path().join("codec.ckpt");
    codec.save(&ck).unwrap();
    let codec = CodecModel::load(&ck).unwrap();

    let (model, seps) = par::with_threads(1, || train_and_separate(&train, &valid, &codec));
    let (model2, seps2) = par::with_threads(2, || train_and_separate(&train, &valid, &codec));
    assert_eq!(model, model2, "training depends on the thread count");
    assert_eq!(seps, seps2, "separation depends on the thread count");

    let mpath = dir.path().join("model.ckpt");
    model.save(&mpath).unwrap();
    assert_eq!(SeparationModel::load(&mpath, &codec).unwrap(), model);

    let mut report = MetricReport::default();
    for (i, (t, s)) in valid.iter().zip(&seps).enumerate() {
        assert_eq!(s.len(), t.mixture.len());
        let out = dir.path().join(format!("sep{i}.wav"));
        write_wav(&out, s).unwrap();
        let back = read_wav(&out).unwrap();
        report.tracks.push(evaluate_track(&format!("t{i}"), &t.vocals, &back, &MetricConfig::default()).unwrap());
    }
    let csv = report.to_csv().unwrap();
    assert_eq!(MetricReport::from_csv(&csv).unwrap(), report);
}

#[test]
fn robustness_grid_is_complete_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (train, valid) = corpus(dir.path());
    let codec = small_codec(&train);
    let clips: Vec<Waveform> = valid.iter().map(|t| t.mixture.clone()).collect();
    let cfg = RobustnessConfig::default();
    let a = run_table(&cfg, &codec, &clips).unwrap();
    let b = par::with_threads(1, || run_table(&cfg, &codec, &clips).unwrap());
    assert_eq!(a, b);
    assert_eq!(a.grid.len(), 4);
    assert!(a.grid.iter().all(|row| row.len() == 6 && row.iter().all(|v| v.is_finite())));
    assert_eq!(a.per_track.len(), 4 * 6 * clips.len());
    assert_eq!(a.cell(Experiment::Bq, 0.0), a.cell(Experiment::Aq, 0.0));
    let csv = a.to_csv().unwrap();
    assert!(csv.starts_with("std,Identity,NQ,BQ,AQ\n"));
    assert!(csv.trim_end().ends_with("features,1,4,4,2"));

    let mut no_rvq = codec.clone();
    no_rvq.codebooks = latsep::rvq::Codebooks::empty();
    assert!(matches!(run_table(&cfg, &no_rvq, &clips), Err(latsep::Error::Unsupported(_))));
}
