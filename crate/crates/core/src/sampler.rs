//! Deterministic DDIM sampling and chunked full-track separation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::codec::CodecModel;
use crate::diffusion::{alpha_beta_at, split_velocity, standard_normal, NoiseSchedule};
use crate::error::{ensure, Error, Result};
use crate::model::SeparationModel;
use crate::par;
use crate::tensor::LatentTensor;
use crate::unet::GeneratorModel;

/// Anything that predicts a velocity from `(x_t, σ_t, C)`.
pub trait VelocityModel: Sync {
    fn velocity(&self, x_t: &LatentTensor, sigma: f64, cond: &LatentTensor) -> Result<LatentTensor>;
}

impl VelocityModel for GeneratorModel {
    fn velocity(&self, x_t: &LatentTensor, sigma: f64, cond: &LatentTensor) -> Result<LatentTensor> {
        self.forward(x_t, sigma, cond)
    }
}

/// Exact denoiser for a known clean latent: returns the true velocity
/// `α·ε − β·x0` with `ε` recovered from `x_t`.
#[derive(Clone, Debug)]
pub struct OracleVelocity {
    pub target: LatentTensor,
}

impl VelocityModel for OracleVelocity {
    fn velocity(&self, x_t: &LatentTensor, sigma: f64, _cond: &LatentTensor) -> Result<LatentTensor> {
        let (a, b) = alpha_beta_at(sigma);
        ensure!(b > 0.0, "oracle velocity is undefined at sigma = 0");
        // v = α·ε − β·x0 with ε = (x_t − α·x0)/β, i.e. v = (α·x_t − x0)/β.
        x_t.zip_map(&self.target, |x, x0| (a * x - x0) / b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub seed: u64,
    /// Samples per chunk; must be a multiple of the codec compression factor.
    pub chunk_samples: usize,
    /// Fraction of a chunk shared with its neighbour, in `[0, 0.5)`.
    pub overlap_fraction: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 50,
            seed: 0,
            chunk_samples: 8192,
            overlap_fraction: 0.2,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, compression_factor: usize) -> Result<()> {
        ensure!(self.num_steps >= 1, "num_steps must be positive");
        ensure!(self.chunk_samples >= 1, "chunk_samples must be positive");
        ensure!(
            self.chunk_samples.is_multiple_of(compression_factor),
            "chunk_samples {} is not a multiple of the compression factor {compression_factor}",
            self.chunk_samples
        );
        ensure!(
            (0.0..0.5).contains(&self.overlap_fraction),
            "overlap_fraction must be in [0, 0.5)"
        );
        Ok(())
    }

    pub fn overlap_samples(&self) -> usize {
        (self.overlap_fraction * self.chunk_samples as f64).round() as usize
    }

    pub fn hop(&self) -> usize {
        self.chunk_samples - self.overlap_samples()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerStepTrace {
    pub t: usize,
    pub x_t: LatentTensor,
    pub x0_hat: LatentTensor,
    pub eps_hat: LatentTensor,
}

/// One DDIM update from step `t` to `t − 1`; returns `(x_{t−1}, x̂0)`.
pub fn ddim_step(
    model: &dyn VelocityModel,
    x_t: &LatentTensor,
    schedule: &NoiseSchedule,
    t: usize,
    cond: &LatentTensor,
) -> Result<(LatentTensor, LatentTensor)> {
    let (x_prev, x0, _) = ddim_step_full(model, x_t, schedule, t, cond)?;
    Ok((x_prev, x0))
}

fn ddim_step_full(
    model: &dyn VelocityModel,
    x_t: &LatentTensor,
    schedule: &NoiseSchedule,
    t: usize,
    cond: &LatentTensor,
) -> Result<(LatentTensor, LatentTensor, LatentTensor)> {
    if t == 0 {
        return Err(Error::InvalidArgument("DDIM step needs t >= 1".into()));
    }
    let (a, b) = schedule.alpha_beta(t)?;
    let (a_prev, b_prev) = schedule.alpha_beta(t - 1)?;
    let v = model.velocity(x_t, schedule.sigma(t)?, cond)?;
    ensure!(v.shape() == x_t.shape(), "model returned {:?} for input {:?}", v.shape(), x_t.shape());
    let (x0, eps) = split_velocity(a, b, x_t, &v)?;
    let x_prev = x0.zip_map(&eps, |u, e| a_prev * u + b_prev * e)?;
    Ok((x_prev, x0, eps))
}

/// Runs DDIM from seeded Gaussian noise at `t = T` down to `t = 1` and
/// returns the last clean estimate.
pub fn sample(model: &dyn VelocityModel, cond: &LatentTensor, schedule: &NoiseSchedule, seed: u64) -> Result<LatentTensor> {
    sample_inner(model, cond, schedule, seed, None)
}

/// As [`sample`], also recording every step.
pub fn sample_with_trace(
    model: &dyn VelocityModel,
    cond: &LatentTensor,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<(LatentTensor, Vec<SamplerStepTrace>)> {
    let mut trace = Vec::with_capacity(schedule.num_steps());
    let out = sample_inner(model, cond, schedule, seed, Some(&mut trace))?;
    Ok((out, trace))
}

fn sample_inner(
    model: &dyn VelocityModel,
    cond: &LatentTensor,
    schedule: &NoiseSchedule,
    seed: u64,
    mut trace: Option<&mut Vec<SamplerStepTrace>>,
) -> Result<LatentTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = standard_normal(cond.rows(), cond.cols(), &mut rng);
    let mut x0 = x.clone();
    for t in (1..=schedule.num_steps()).rev() {
        let (x_prev, x0_hat, eps_hat) = ddim_step_full(model, &x, schedule, t, cond)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(SamplerStepTrace {
                t,
                x_t: x.clone(),
                x0_hat: x0_hat.clone(),
                eps_hat,
            });
        }
        x = x_prev;
        x0 = x0_hat;
    }
    Ok(x0)
}

/// Chunk start offsets covering `len` samples.
pub fn chunk_starts(len: usize, cfg: &SamplerConfig) -> Vec<usize> {
    let (c, h) = (cfg.chunk_samples, cfg.hop());
    let n = if len <= c { 1 } else { 1 + (len - c).div_ceil(h) };
    (0..n).map(|k| k * h).collect()
}

/// Overlap-add weights for chunk `k` of `n`: linear ramps over the shared
/// region so neighbouring weights sum to one.
pub fn crossfade_weights(k: usize, n: usize, cfg: &SamplerConfig) -> Vec<f64> {
    let (c, o) = (cfg.chunk_samples, cfg.overlap_samples());
    let mut w = vec![1.0; c];
    if o == 0 {
        return w;
    }
    for j in 0..o {
        let up = (j as f64 + 0.5) / o as f64;
        if k > 0 {
            w[j] = up;
        }
        if k + 1 < n {
            w[c - o + j] = 1.0 - up;
        }
    }
    w
}

/// Sum of all chunk weights at every output position (1 everywhere for a
/// valid crossfade).
pub fn weight_sum(len: usize, cfg: &SamplerConfig) -> Vec<f64> {
    let starts = chunk_starts(len, cfg);
    let total = starts.last().unwrap() + cfg.chunk_samples;
    let mut sum = vec![0.0; total];
    for (k, &s) in starts.iter().enumerate() {
        for (j, w) in crossfade_weights(k, starts.len(), cfg).into_iter().enumerate() {
            sum[s + j] += w;
        }
    }
    sum.truncate(len);
    sum
}

/// Separates vocals from a full mixture: per chunk, condition on the
/// mixture, sample a normalized vocal latent, denormalize and decode; then
/// crossfade the chunks and trim to the input length.
pub fn separate_track(model: &SeparationModel, codec: &CodecModel, mixture: &Waveform, cfg: &SamplerConfig) -> Result<Waveform> {
    ensure!(!mixture.is_empty(), "mixture is empty");
    cfg.validate(codec.config.compression_factor)?;
    let schedule = NoiseSchedule::new(cfg.num_steps)?;
    let starts = chunk_starts(mixture.len(), cfg);
    let n = starts.len();
    let chunks = par::map_indexed(n, |k| -> Result<Waveform> {
        let seg = mixture.segment(starts[k], starts[k] + cfg.chunk_samples);
        let cond = model.condition(codec, &seg)?;
        let z = sample(&model.generator, &cond, &schedule, par::derive_seed(cfg.seed, k as u64))?;
        let audio = codec.decode(&codec.denormalize(&z)?)?;
        Ok(audio.resized(cfg.chunk_samples))
    });
    let total = starts[n - 1] + cfg.chunk_samples;
    let mut out = Waveform::silence(mixture.sample_rate, mixture.num_channels(), total);
    for (k, chunk) in chunks.into_iter().enumerate() {
        let chunk = chunk?;
        let w = crossfade_weights(k, n, cfg);
        for c in 0..out.num_channels() {
            let dst = &mut out.channel_mut(c)[starts[k]..starts[k] + cfg.chunk_samples];
            for ((d, &s), &wj) in dst.iter_mut().zip(chunk.channel(c)).zip(&w) {
                *d += wj * s;
            }
        }
    }
    Ok(out.resized(mixture.len()))
}

/// Seam discontinuity: mean |ΔRMS| between the `frame`-sample windows on
/// either side of each crossfade centre, divided by the mean |ΔRMS| between
/// consecutive windows elsewhere. Returns `None` without seams.
pub fn seam_ratio(audio: &Waveform, cfg: &SamplerConfig, frame: usize) -> Option<f64> {
    let x = audio.downmix();
    let starts = chunk_starts(x.len(), cfg);
    if starts.len() < 2 || frame == 0 {
        return None;
    }
    let rms = |a: usize| -> Option<f64> {
        let s = x.get(a..a + frame)?;
        Some((s.iter().map(|v| v * v).sum::<f64>() / frame as f64).sqrt())
    };
    let o = cfg.overlap_samples();
    let seams: Vec<usize> = starts[1..].iter().map(|&s| s + o / 2).collect();
    let seam_deltas: Vec<f64> = seams
        .iter()
        .filter_map(|&c| Some((rms(c.checked_sub(frame)?)? - rms(c)?).abs()))
        .collect();
    let near_seam = |a: usize| seams.iter().any(|&c| a + 2 * frame > c && a < c + frame);
    let mut base = Vec::new();
    let mut a = 0;
    while a + 2 * frame <= x.len() {
        if !near_seam(a) {
            base.push((rms(a)? - rms(a + frame)?).abs());
        }
        a += frame;
    }
    if seam_deltas.is_empty() || base.is_empty() {
        return None;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let b = mean(&base);
    Some(if b > 0.0 { mean(&seam_deltas) / b } else { f64::INFINITY })
}

/// Shape-only helper for callers that need the latent grid of a chunk.
pub fn chunk_latent_shape(codec: &CodecModel, cfg: &SamplerConfig) -> (usize, usize) {
    (codec.config.feature_channels, cfg.chunk_samples / codec.config.compression_factor)
}
