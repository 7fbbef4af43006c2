//! Two-stage generator training: stage 1 with the mixture conditioner
//! frozen, stage 2 with it unfrozen at a lower learning rate. The codec used
//! for the vocal targets is frozen throughout.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::autograd::{Gradients, Graph};
use crate::checkpoint::{Checkpoint, Cursor, Kind};
use crate::codec::CodecModel;
use crate::dataset::StemSet;
use crate::diffusion::{sample_train_step, standard_normal, NoiseSchedule};
use crate::error::{ensure, Error, Result};
use crate::model::SeparationModel;
use crate::par::{self, derive_seed};
use crate::params::{AdamW, AdamWConfig, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    PolarityInversion,
    ChannelFlip,
    PitchShift,
    StemRemix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub weight_decay: f64,
    /// Examples per optimizer step, split into `grad_accum` micro-batches.
    pub batch_size: usize,
    pub grad_accum: usize,
    pub seed: u64,
    pub augmentations: BTreeSet<Augmentation>,
    /// Training crop length in samples (rounded up to whole latent frames).
    pub crop_samples: usize,
    /// Diffusion steps `T` of the training schedule.
    pub num_steps: usize,
    /// Fixed validation examples drawn from the validation tracks.
    pub valid_examples: usize,
    /// Validation loss is logged every this many steps (0 = stage ends only).
    pub valid_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 5000,
            stage2_steps: 2000,
            lr_stage1: 2e-4,
            lr_stage2: 5e-5,
            weight_decay: 1e-3,
            batch_size: 8,
            grad_accum: 1,
            seed: 0,
            augmentations: [
                Augmentation::PolarityInversion,
                Augmentation::ChannelFlip,
                Augmentation::PitchShift,
                Augmentation::StemRemix,
            ]
            .into_iter()
            .collect(),
            crop_samples: 8192,
            num_steps: 50,
            valid_examples: 32,
            valid_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.stage1_steps + self.stage2_steps > 0, "total training steps must be positive");
        ensure!(self.lr_stage1 > 0.0 && self.lr_stage2 > 0.0, "learning rates must be positive");
        ensure!(self.lr_stage2 <= self.lr_stage1, "stage-2 learning rate must not exceed stage 1");
        ensure!(self.weight_decay >= 0.0, "weight decay must be non-negative");
        ensure!(self.batch_size >= 1, "batch size must be positive");
        ensure!(self.grad_accum >= 1, "grad_accum must be positive");
        ensure!(self.num_steps >= 1, "num_steps must be positive");
        ensure!(self.crop_samples >= 1, "crop_samples must be positive");
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.stage1_steps + self.stage2_steps
    }

    /// 1 while the conditioner is frozen, 2 after.
    pub fn stage_of(&self, step: usize) -> u8 {
        if step < self.stage1_steps {
            1
        } else {
            2
        }
    }

    pub fn lr_of(&self, step: usize) -> f64 {
        if self.stage_of(step) == 1 {
            self.lr_stage1
        } else {
            self.lr_stage2
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

static MONO_FLIP_WARNED: AtomicBool = AtomicBool::new(false);

/// Linear-interpolation resampling: `y[n] = x(n · ratio)` for `len` outputs.
/// Reads past the end are zero.
pub fn resample_linear(x: &[f64], ratio: f64, len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| {
            let pos = n as f64 * ratio;
            let i = pos.floor() as usize;
            let frac = pos - i as f64;
            let a = x.get(i).copied().unwrap_or(0.0);
            if frac == 0.0 {
                a
            } else {
                a * (1.0 - frac) + x.get(i + 1).copied().unwrap_or(0.0) * frac
            }
        })
        .collect()
}

fn pitch_shift(w: &Waveform, ratio: f64, len: usize) -> Waveform {
    let chans = w.channels().iter().map(|c| resample_linear(c, ratio, len)).collect();
    Waveform::new(w.sample_rate, chans).expect("resampled channels share a length")
}

const MAX_SHIFT_SEMITONES: f64 = 2.0;

/// Negates both stems (and hence the mixture).
pub fn invert_polarity(s: &StemSet) -> StemSet {
    StemSet::from_stems(s.vocals.map(|v| -v), s.accompaniment.map(|v| -v)).expect("same shape")
}

/// Swaps left and right of both stems; mono input is returned unchanged
/// with a (one-time) warning.
pub fn flip_channels(s: &StemSet) -> StemSet {
    if s.vocals.num_channels() != 2 {
        if !MONO_FLIP_WARNED.swap(true, Ordering::Relaxed) {
            warn!("channel flip needs stereo audio; skipping it for {}-channel data", s.vocals.num_channels());
        }
        return s.clone();
    }
    let swap = |w: &Waveform| {
        let mut c = w.channels().to_vec();
        c.swap(0, 1);
        Waveform::new(w.sample_rate, c).expect("same shape")
    };
    StemSet::from_stems(swap(&s.vocals), swap(&s.accompaniment)).expect("same shape")
}

/// Resamples both stems by the same `ratio` (pitch and tempo move
/// together), producing `len` samples.
pub fn pitch_shift_stems(s: &StemSet, ratio: f64, len: usize) -> StemSet {
    StemSet::from_stems(pitch_shift(&s.vocals, ratio, len), pitch_shift(&s.accompaniment, ratio, len)).expect("same shape")
}

/// Source span needed to produce `len` output samples at `ratio`.
fn source_span(len: usize, ratio: f64) -> usize {
    ((len.max(1) as f64 - 1.0) * ratio).ceil() as usize + 2
}

/// Draws one training example from `tracks[index]`: a random crop of `len`
/// samples with the enabled augmentations applied coherently to both stems.
/// Stem remix takes the accompaniment from a different random track. The
/// mixture is always rebuilt as the exact sum of the augmented stems.
pub fn apply_augmentations(
    tracks: &[StemSet],
    index: usize,
    len: usize,
    augmentations: &BTreeSet<Augmentation>,
    rng: &mut impl Rng,
) -> Result<StemSet> {
    ensure!(index < tracks.len(), "track index {index} out of range");
    let has = |a| augmentations.contains(&a);
    let ratio = if has(Augmentation::PitchShift) {
        2f64.powf(rng.random_range(-MAX_SHIFT_SEMITONES..=MAX_SHIFT_SEMITONES) / 12.0)
    } else {
        1.0
    };
    let span = source_span(len, ratio);
    let offset = |n: usize, rng: &mut dyn rand::RngCore| if n > span { rng.random_range(0..=n - span) } else { 0 };
    let start_v = offset(tracks[index].len(), rng);
    let (acc_index, start_a) = if has(Augmentation::StemRemix) && tracks.len() > 1 {
        let j = rng.random_range(0..tracks.len() - 1);
        let j = if j >= index { j + 1 } else { j };
        (j, offset(tracks[j].len(), rng))
    } else {
        (index, start_v)
    };
    let mut pair = StemSet::from_stems(
        tracks[index].vocals.segment(start_v, start_v + span),
        tracks[acc_index].accompaniment.segment(start_a, start_a + span),
    )?;
    if has(Augmentation::PolarityInversion) && rng.random_bool(0.5) {
        pair = invert_polarity(&pair);
    }
    if has(Augmentation::ChannelFlip) && rng.random_bool(0.5) {
        pair = flip_channels(&pair);
    }
    Ok(pitch_shift_stems(&pair, ratio, len))
}

/// Optimizer state and progress of a (possibly interrupted) run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Optimizer steps completed.
    pub step: usize,
    pub generator_opt: AdamW,
    pub conditioner_opt: AdamW,
    /// Recent training losses, newest last.
    pub loss_window: Vec<f64>,
}

const LOSS_WINDOW: usize = 50;

impl TrainState {
    pub fn new(model: &SeparationModel, weight_decay: f64) -> Self {
        let cfg = AdamWConfig {
            weight_decay,
            ..AdamWConfig::default()
        };
        Self {
            step: 0,
            generator_opt: AdamW::new(&model.generator.params, cfg),
            conditioner_opt: AdamW::new(&model.conditioner, cfg),
            loss_window: Vec::new(),
        }
    }

    /// Conditioner frozen in stage 1.
    pub fn conditioner_frozen(&self, cfg: &TrainConfig) -> bool {
        cfg.stage_of(self.step) == 1
    }

    pub fn mean_recent_loss(&self) -> Option<f64> {
        (!self.loss_window.is_empty()).then(|| self.loss_window.iter().sum::<f64>() / self.loss_window.len() as f64)
    }

    fn push_loss(&mut self, l: f64) {
        self.loss_window.push(l);
        if self.loss_window.len() > LOSS_WINDOW {
            self.loss_window.remove(0);
        }
    }
}

fn push_moments(ck: &mut Checkpoint, opt: &AdamW) {
    let (m, v) = opt.moments();
    for part in [m, v] {
        for row in part {
            ck.tensors.push(Tensor::from_vec(1, row.len(), row.clone()).expect("moment row"));
        }
    }
}

fn read_moments(cur: &mut Cursor<'_>, like: &ParamStore, config: AdamWConfig, step: u64) -> Result<AdamW> {
    let mut parts = [Vec::new(), Vec::new()];
    for part in parts.iter_mut() {
        for p in like.iter() {
            let t = cur.tensor()?;
            ensure!(t.len() == p.value.len(), "optimizer moment for {} has the wrong size", p.name);
            part.push(t.data().to_vec());
        }
    }
    let [m, v] = parts;
    Ok(AdamW::from_parts(config, step, m, v))
}

/// Resumable training snapshot: model, optimizer moments and step counter.
pub fn state_to_checkpoint(model: &SeparationModel, state: &TrainState) -> Checkpoint {
    let inner = model.to_checkpoint();
    let mut ck = Checkpoint::new(Kind::TrainState);
    ck.ints = vec![
        state.step as u64,
        state.generator_opt.step_count(),
        state.conditioner_opt.step_count(),
        inner.ints.len() as u64,
        inner.tensors.len() as u64,
        state.loss_window.len() as u64,
    ];
    ck.ints.extend(&inner.ints);
    // Reals kept bit-exact so a resumed run matches an uninterrupted one.
    ck.ints.push(state.generator_opt.config.weight_decay.to_bits());
    ck.ints.extend(state.loss_window.iter().map(|l| l.to_bits()));
    ck.tensors = inner.tensors;
    push_moments(&mut ck, &state.generator_opt);
    push_moments(&mut ck, &state.conditioner_opt);
    ck
}

pub fn state_from_checkpoint(ck: &Checkpoint, codec: &CodecModel) -> Result<(SeparationModel, TrainState)> {
    ck.expect_kind(Kind::TrainState)?;
    ensure!(ck.ints.len() >= 6, "training checkpoint header is too short");
    let (n_ints, n_tensors, n_window) = (ck.ints[3] as usize, ck.ints[4] as usize, ck.ints[5] as usize);
    ensure!(ck.ints.len() == 7 + n_ints + n_window, "training checkpoint header has the wrong length");
    ensure!(ck.tensors.len() >= n_tensors, "training checkpoint payload is too short");
    let reals: Vec<f64> = ck.ints[6 + n_ints..].iter().map(|&b| f64::from_bits(b)).collect();
    let inner = Checkpoint {
        kind: Kind::Generator,
        ints: ck.ints[6..6 + n_ints].to_vec(),
        floats: Vec::new(),
        tensors: ck.tensors[..n_tensors].to_vec(),
    };
    let model = SeparationModel::from_checkpoint(&inner, codec)?;
    let rest = Checkpoint {
        kind: Kind::TrainState,
        ints: Vec::new(),
        floats: Vec::new(),
        tensors: ck.tensors[n_tensors..].to_vec(),
    };
    let cfg = AdamWConfig {
        weight_decay: reals[0],
        ..AdamWConfig::default()
    };
    let mut cur = Cursor::new(&rest);
    let generator_opt = read_moments(&mut cur, &model.generator.params, cfg, ck.ints[1])?;
    let conditioner_opt = read_moments(&mut cur, &model.conditioner, cfg, ck.ints[2])?;
    cur.finish()?;
    let state = TrainState {
        step: ck.ints[0] as usize,
        generator_opt,
        conditioner_opt,
        loss_window: reals[1..].to_vec(),
    };
    Ok((model, state))
}

/// One diffusion training example, fully determined by its seed.
#[derive(Clone, Debug)]
pub struct Example {
    pub vocals: Tensor,
    pub mixture: Tensor,
    pub t: usize,
    pub eps: Tensor,
}

/// Builds the example for `(seed, tracks)`: augmented crop, diffusion step and noise.
pub fn draw_example(
    tracks: &[StemSet],
    codec: &CodecModel,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    augment: bool,
    seed: u64,
) -> Result<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = codec.config.padded_len(cfg.crop_samples);
    let index = rng.random_range(0..tracks.len());
    let none = BTreeSet::new();
    let augs = if augment { &cfg.augmentations } else { &none };
    let pair = apply_augmentations(tracks, index, len, augs, &mut rng)?;
    let t = sample_train_step(schedule, &mut rng);
    let eps = standard_normal(codec.config.feature_channels, len / codec.config.compression_factor, &mut rng);
    Ok(Example {
        vocals: pair.vocals.to_tensor(),
        mixture: pair.mixture.to_tensor(),
        t,
        eps,
    })
}

/// Loss of one example and, when `trainable` is set for either group,
/// the gradients (generator slots first, conditioner slots after).
pub fn example_loss(
    model: &SeparationModel,
    codec: &CodecModel,
    schedule: &NoiseSchedule,
    ex: &Example,
    train_generator: bool,
    train_conditioner: bool,
) -> Result<(f64, Gradients)> {
    ensure!(
        ex.vocals.shape() == ex.mixture.shape(),
        "vocals {:?} and mixture {:?} are not aligned",
        ex.vocals.shape(),
        ex.mixture.shape()
    );
    // Target path: the frozen codec encoder, normalized.
    let x0 = codec.normalize(&codec.encode(&Waveform::from_tensor(codec.config.sample_rate, &ex.vocals))?)?;
    let (a, b) = schedule.alpha_beta(ex.t)?;
    let x_t = x0.zip_map(&ex.eps, |x, e| a * x + b * e)?;
    let v = ex.eps.zip_map(&x0, |e, x| a * e - b * x)?;
    let mut g = Graph::new();
    let offset = model.generator.params.len();
    let cond = model.condition_graph(codec, &model.conditioner.bind(offset, train_conditioner), &mut g, &ex.mixture);
    let xv = g.constant(x_t);
    let out = model
        .generator
        .forward_graph(&model.generator.params.bind(0, train_generator), &mut g, xv, schedule.sigma(ex.t)?, cond)?;
    let loss = g.mse_loss(out, &v);
    let value = g.value(loss).get(0, 0);
    let grads = if train_generator || train_conditioner {
        g.backward(loss)
    } else {
        Gradients::default()
    };
    Ok((value, grads))
}

/// One optimizer step over `batch` examples (accumulated over
/// `grad_accum` micro-batches); updates only the unfrozen groups.
pub fn train_step(
    model: &mut SeparationModel,
    state: &mut TrainState,
    codec: &CodecModel,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    batch: &[Example],
) -> Result<f64> {
    ensure!(!batch.is_empty(), "training batch is empty");
    let train_cond = !state.conditioner_frozen(cfg);
    let micro = batch.len().div_ceil(cfg.grad_accum);
    let mut total = Gradients::default();
    let mut loss = 0.0;
    for chunk in batch.chunks(micro) {
        let results = par::map_slice(chunk, |ex| example_loss(model, codec, schedule, ex, true, train_cond));
        for r in results {
            let (l, g) = r?;
            ensure!(l.is_finite(), "training loss diverged at step {}", state.step);
            loss += l;
            total.merge(&g);
        }
    }
    total.scale(1.0 / batch.len() as f64);
    loss /= batch.len() as f64;
    let lr = cfg.lr_of(state.step);
    state.generator_opt.update(&mut model.generator.params, &total, 0, lr);
    if train_cond {
        let offset = model.generator.params.len();
        state.conditioner_opt.update(&mut model.conditioner, &total, offset, lr);
    }
    state.step += 1;
    state.push_loss(loss);
    Ok(loss)
}

/// Fixed validation examples (no augmentation), reproducible from the seed.
pub fn validation_set(tracks: &[StemSet], codec: &CodecModel, cfg: &TrainConfig, schedule: &NoiseSchedule) -> Result<Vec<Example>> {
    if tracks.is_empty() {
        return Ok(Vec::new());
    }
    par::map_indexed(cfg.valid_examples, |i| {
        draw_example(tracks, codec, cfg, schedule, false, derive_seed(cfg.seed ^ 0x7a11d, i as u64))
    })
    .into_iter()
    .collect()
}

pub fn validation_loss(model: &SeparationModel, codec: &CodecModel, schedule: &NoiseSchedule, set: &[Example]) -> Result<Option<f64>> {
    if set.is_empty() {
        return Ok(None);
    }
    let losses = par::map_slice(set, |ex| example_loss(model, codec, schedule, ex, false, false).map(|r| r.0));
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(Some(sum / set.len() as f64))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub final_train_loss: Option<f64>,
    pub stage1_valid_loss: Option<f64>,
    pub stage2_valid_loss: Option<f64>,
    /// `(step, loss)` for every optimizer step run in this call.
    pub losses: Vec<(usize, f64)>,
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Appends `step,stage,loss,lr` rows (and `valid` rows) here.
    pub metrics_csv: Option<PathBuf>,
    /// Stage-boundary training-state checkpoints go here.
    pub checkpoint_dir: Option<PathBuf>,
}

fn append_csv(path: &Path, line: &str) -> Result<()> {
    let new = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    if new {
        writeln!(f, "step,stage,loss,lr").map_err(|e| Error::io(path, e))?;
    }
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Runs (or continues) two-stage training until `stop_at` steps (the
/// configured total when `None`). Batches depend only on the seed and the
/// step index, so a resumed run follows the same trajectory as an
/// uninterrupted one.
#[allow(clippy::too_many_arguments)]
pub fn run_two_stage(
    cfg: &TrainConfig,
    codec: &CodecModel,
    model: &mut SeparationModel,
    state: &mut TrainState,
    train_tracks: &[StemSet],
    valid_tracks: &[StemSet],
    outputs: &TrainOutputs,
    stop_at: Option<usize>,
) -> Result<TrainReport> {
    cfg.validate()?;
    codec.require_trained()?;
    ensure!(!train_tracks.is_empty(), "no training tracks");
    let schedule = NoiseSchedule::new(cfg.num_steps)?;
    let valid = validation_set(valid_tracks, codec, cfg, &schedule)?;
    let end = stop_at.unwrap_or(cfg.total_steps()).min(cfg.total_steps());
    let mut report = TrainReport::default();
    if let Some(dir) = &outputs.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    while state.step < end {
        let step = state.step;
        let step_seed = derive_seed(cfg.seed, step as u64);
        let batch = par::map_indexed(cfg.batch_size, |i| {
            draw_example(train_tracks, codec, cfg, &schedule, true, derive_seed(step_seed, i as u64))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let loss = train_step(model, state, codec, cfg, &schedule, &batch)?;
        report.losses.push((step, loss));
        if let Some(p) = &outputs.metrics_csv {
            append_csv(p, &format!("{step},{},{loss},{}", cfg.stage_of(step), cfg.lr_of(step)))?;
        }
        let boundary = state.step == cfg.stage1_steps || state.step == cfg.total_steps();
        let periodic = cfg.valid_every > 0 && state.step.is_multiple_of(cfg.valid_every);
        if boundary || periodic {
            let vl = validation_loss(model, codec, &schedule, &valid)?;
            if let Some(vl) = vl {
                info!("step {}: train {:.4} valid {vl:.4}", state.step, state.mean_recent_loss().unwrap_or(loss));
                if let Some(p) = &outputs.metrics_csv {
                    append_csv(p, &format!("{},valid,{vl},", state.step))?;
                }
            }
            if boundary {
                if state.step == cfg.stage1_steps {
                    report.stage1_valid_loss = vl;
                } else {
                    report.stage2_valid_loss = vl;
                }
                if let Some(dir) = &outputs.checkpoint_dir {
                    let name = if state.step == cfg.stage1_steps { "stage1.state" } else { "stage2.state" };
                    state_to_checkpoint(model, state).save(dir.join(name))?;
                }
            }
        } else if state.step.is_multiple_of(50) {
            info!("step {}: train {:.4}", state.step, state.mean_recent_loss().unwrap_or(loss));
        }
    }
    report.steps = state.step;
    report.final_train_loss = state.mean_recent_loss();
    Ok(report)
}
