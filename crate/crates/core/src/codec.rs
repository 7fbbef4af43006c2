//! A small convolutional audio autoencoder with optional residual vector
//! quantization: encoder `E`, quantizer `Q`, dequantizer `dQ`, decoder `dE`.
//!
//! The encoder is a stack of strided convolutions whose strides multiply to the
//! compression factor; the decoder mirrors it with transposed convolutions.
//! Codebooks are fit after the autoencoder, by k-means over encoded latents.

use std::sync::Arc;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::autograd::{Gradients, Graph, Var};
use crate::checkpoint::{push_store, Checkpoint, Cursor, Kind};
use crate::error::{ensure, Error, Result};
use crate::nn::{Conv1d, ConvTranspose1d};
use crate::par;
use crate::params::{AdamW, AdamWConfig, Bind, ParamStore};
use crate::rvq::{Codebooks, QuantizedLatent};
use crate::spectral::StftPlan;
use crate::tensor::{LatentTensor, Tensor};

const LEAK: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub audio_channels: usize,
    /// Samples per latent frame.
    pub compression_factor: usize,
    pub feature_channels: usize,
    /// 0 disables quantization.
    pub rvq_stages: usize,
    pub codebook_size: usize,
    pub sample_rate: u32,
    /// Width of the first convolution; deeper layers double up to 4×.
    pub hidden_channels: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            audio_channels: 1,
            compression_factor: 64,
            feature_channels: 8,
            rvq_stages: 4,
            codebook_size: 64,
            sample_rate: 8000,
            hidden_channels: 16,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.audio_channels == 1 || self.audio_channels == 2,
            "audio_channels must be 1 or 2"
        );
        ensure!(self.compression_factor >= 1, "compression factor must be positive");
        ensure!(self.feature_channels >= 1, "feature_channels must be positive");
        ensure!(self.codebook_size >= 1, "codebook_size must be positive");
        ensure!(self.hidden_channels >= 1, "hidden_channels must be positive");
        Ok(())
    }

    /// Downsampling strides, largest first, multiplying to the compression factor.
    pub fn strides(&self) -> Vec<usize> {
        let mut cf = self.compression_factor;
        let mut out = Vec::new();
        while cf.is_multiple_of(4) {
            out.push(4);
            cf /= 4;
        }
        while cf.is_multiple_of(2) {
            out.push(2);
            cf /= 2;
        }
        if cf > 1 {
            out.push(cf);
        }
        out
    }

    fn widths(&self) -> Vec<usize> {
        let n = self.strides().len();
        (0..=n)
            .map(|i| self.hidden_channels * (1usize << i.min(2)))
            .collect()
    }

    pub fn num_frames(&self, samples: usize) -> usize {
        samples.div_ceil(self.compression_factor)
    }

    pub fn padded_len(&self, samples: usize) -> usize {
        self.num_frames(samples) * self.compression_factor
    }
}

fn stride_geometry(stride: usize) -> (usize, usize) {
    if stride.is_multiple_of(2) {
        (2 * stride, stride / 2)
    } else {
        (stride, 0)
    }
}

/// Strided-convolution encoder `A × S → F × S/cf`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    input: Conv1d,
    down: Vec<Conv1d>,
    output: Conv1d,
}

impl Encoder {
    fn new(cfg: &CodecConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let widths = cfg.widths();
        let input = Conv1d::same(store, "enc.in", rng, cfg.audio_channels, widths[0], 7);
        let down = cfg
            .strides()
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let (k, p) = stride_geometry(s);
                Conv1d::new(store, &format!("enc.down{i}"), rng, widths[i], widths[i + 1], k, s, p)
            })
            .collect();
        let output = Conv1d::same(store, "enc.out", rng, *widths.last().unwrap(), cfg.feature_channels, 3);
        Self { input, down, output }
    }

    /// `x` is `A × S` with `S` a multiple of the compression factor.
    pub fn forward(&self, p: &Bind<'_>, g: &mut Graph, x: Var) -> Var {
        let mut h = self.input.forward(p, g, x);
        h = g.leaky_relu(h, LEAK);
        for d in &self.down {
            h = d.forward(p, g, h);
            h = g.leaky_relu(h, LEAK);
        }
        self.output.forward(p, g, h)
    }
}

/// Transposed-convolution decoder `F × D → A × D·cf`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    input: Conv1d,
    up: Vec<ConvTranspose1d>,
    output: Conv1d,
}

impl Decoder {
    fn new(cfg: &CodecConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let widths = cfg.widths();
        let strides = cfg.strides();
        let n = strides.len();
        let input = Conv1d::same(store, "dec.in", rng, cfg.feature_channels, widths[n], 3);
        let up = (0..n)
            .rev()
            .map(|i| {
                let (k, p) = stride_geometry(strides[i]);
                ConvTranspose1d::new(store, &format!("dec.up{i}"), rng, widths[i + 1], widths[i], k, strides[i], p)
            })
            .collect();
        let output = Conv1d::same(store, "dec.out", rng, widths[0], cfg.audio_channels, 7);
        Self { input, up, output }
    }

    pub fn forward(&self, p: &Bind<'_>, g: &mut Graph, z: Var) -> Var {
        let mut h = self.input.forward(p, g, z);
        h = g.leaky_relu(h, LEAK);
        for u in &self.up {
            h = u.forward(p, g, h);
            h = g.leaky_relu(h, LEAK);
        }
        self.output.forward(p, g, h)
    }
}

/// Encoder, decoder, codebooks and the corpus latent scale.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecModel {
    pub config: CodecConfig,
    pub encoder: Encoder,
    pub encoder_params: ParamStore,
    pub decoder: Decoder,
    pub decoder_params: ParamStore,
    pub codebooks: Codebooks,
    /// Global latent standard deviation over the training corpus.
    pub latent_scale: f64,
    pub trained: bool,
}

impl CodecModel {
    /// Randomly initialized, untrained codec.
    pub fn init(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder_params = ParamStore::new();
        let encoder = Encoder::new(&config, &mut encoder_params, &mut rng);
        let mut decoder_params = ParamStore::new();
        let decoder = Decoder::new(&config, &mut decoder_params, &mut rng);
        Ok(Self {
            config,
            encoder,
            encoder_params,
            decoder,
            decoder_params,
            codebooks: Codebooks::empty(),
            latent_scale: 1.0,
            trained: false,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.encoder_params.num_scalars() + self.decoder_params.num_scalars()
    }

    pub fn quantization_enabled(&self) -> bool {
        self.codebooks.num_stages() > 0
    }

    fn check_audio(&self, audio: &Waveform) -> Result<()> {
        ensure!(
            audio.num_channels() == self.config.audio_channels,
            "codec expects {} audio channels, got {}",
            self.config.audio_channels,
            audio.num_channels()
        );
        ensure!(audio.is_finite(), "audio contains non-finite samples");
        Ok(())
    }

    /// `E`: waveform `A × S` to latent `F × ceil(S / cf)`; input is zero-padded
    /// to a whole number of frames.
    pub fn encode(&self, audio: &Waveform) -> Result<LatentTensor> {
        self.check_audio(audio)?;
        if audio.is_empty() {
            return Ok(Tensor::zeros(self.config.feature_channels, 0));
        }
        let padded = audio.resized(self.config.padded_len(audio.len()));
        let mut g = Graph::new();
        let x = g.constant(padded.to_tensor());
        let z = self.encoder.forward(&self.encoder_params.bind(0, false), &mut g, x);
        Ok(g.value(z).clone())
    }

    /// `dE`: latent `F × D` to waveform `A × D·cf`, decoded as one stream.
    pub fn decode(&self, latent: &LatentTensor) -> Result<Waveform> {
        ensure!(
            latent.rows() == self.config.feature_channels,
            "latent has {} feature rows, codec expects {}",
            latent.rows(),
            self.config.feature_channels
        );
        if latent.cols() == 0 {
            return Ok(Waveform::silence(self.config.sample_rate, self.config.audio_channels, 0));
        }
        let mut g = Graph::new();
        let z = g.constant(latent.clone());
        let y = self.decoder.forward(&self.decoder_params.bind(0, false), &mut g, z);
        Ok(Waveform::from_tensor(self.config.sample_rate, g.value(y)))
    }

    /// `Q`: greedy residual VQ of every latent frame.
    pub fn quantize(&self, latent: &LatentTensor) -> Result<QuantizedLatent> {
        self.codebooks.quantize(latent)
    }

    /// `dQ`: sum of the indexed codewords.
    pub fn dequantize(&self, q: &QuantizedLatent) -> Result<LatentTensor> {
        self.codebooks.dequantize(q)
    }

    /// Full `dE(E(x))` round trip, optionally through `dQ(Q(·))`.
    pub fn reconstruct(&self, audio: &Waveform, quantized: bool) -> Result<Waveform> {
        let mut z = self.encode(audio)?;
        if quantized {
            z = self.dequantize(&self.quantize(&z)?)?;
        }
        Ok(self.decode(&z)?.resized(audio.len()))
    }

    pub fn normalize(&self, latent: &LatentTensor) -> Result<LatentTensor> {
        normalize_latent(latent, self.latent_scale)
    }

    pub fn denormalize(&self, latent: &LatentTensor) -> Result<LatentTensor> {
        denormalize_latent(latent, self.latent_scale)
    }

    pub fn require_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::InvalidState("codec has not been trained".into()))
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::new(Kind::Codec);
        ck.ints = vec![
            c.audio_channels as u64,
            c.compression_factor as u64,
            c.feature_channels as u64,
            c.rvq_stages as u64,
            c.codebook_size as u64,
            c.sample_rate as u64,
            c.hidden_channels as u64,
            self.trained as u64,
            self.codebooks.num_stages() as u64,
        ];
        ck.floats = vec![self.latent_scale as f32];
        push_store(&mut ck, &self.encoder_params);
        push_store(&mut ck, &self.decoder_params);
        ck.tensors.extend(self.codebooks.stages().iter().cloned());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(Kind::Codec)?;
        let mut cur = Cursor::new(ck);
        let config = CodecConfig {
            audio_channels: cur.usize()?,
            compression_factor: cur.usize()?,
            feature_channels: cur.usize()?,
            rvq_stages: cur.usize()?,
            codebook_size: cur.usize()?,
            sample_rate: cur.int()? as u32,
            hidden_channels: cur.usize()?,
        };
        let trained = cur.int()? != 0;
        let stages = cur.usize()?;
        let mut model = Self::init(config, 0)?;
        model.trained = trained;
        model.latent_scale = cur.float()?;
        cur.fill(&mut model.encoder_params)?;
        cur.fill(&mut model.decoder_params)?;
        let books = (0..stages).map(|_| cur.tensor().cloned()).collect::<Result<Vec<_>>>()?;
        model.codebooks = Codebooks::new(books)?;
        cur.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Divides a latent by the corpus scale.
pub fn normalize_latent(latent: &LatentTensor, scale: f64) -> Result<LatentTensor> {
    ensure!(scale > 0.0 && scale.is_finite(), "latent scale must be positive, got {scale}");
    Ok(latent.scale(1.0 / scale))
}

pub fn denormalize_latent(latent: &LatentTensor, scale: f64) -> Result<LatentTensor> {
    ensure!(scale > 0.0 && scale.is_finite(), "latent scale must be positive, got {scale}");
    Ok(latent.scale(scale))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Training crop length in samples; rounded up to a whole number of frames.
    pub crop_len: usize,
    pub lr: f64,
    pub seed: u64,
    pub kmeans_iters: usize,
    /// Upper bound on latent frames used for codebook fitting.
    pub kmeans_max_vectors: usize,
    /// STFT sizes for the spectral loss terms.
    pub fft_sizes: Vec<usize>,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            crop_len: 4096,
            lr: 2e-3,
            seed: 0,
            kmeans_iters: 15,
            kmeans_max_vectors: 40_000,
            fft_sizes: vec![128, 512],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub latent_scale: f64,
}

/// Waveform L1 plus multi-resolution STFT-magnitude L1.
struct ReconLoss {
    plans: Vec<Arc<StftPlan>>,
}

impl ReconLoss {
    fn new(fft_sizes: &[usize]) -> Result<Self> {
        let plans = fft_sizes
            .iter()
            .map(|&n| StftPlan::new(n, n / 4).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { plans })
    }

    fn build(&self, g: &mut Graph, y: Var, target: &Tensor) -> Var {
        let mut loss = g.l1_loss(y, target);
        for plan in &self.plans {
            // Magnitudes are normalized by the window sum so every scale is
            // comparable to the waveform term.
            let norm = 2.0 / plan.fft_size() as f64;
            for c in 0..target.rows() {
                let yc = if target.rows() == 1 { y } else { g.row(y, c) };
                let tmag = plan.magnitude(target.row(c));
                let s = g.stft_mag_l1(yc, plan.clone(), &tmag);
                let s = g.scale(s, norm / target.rows() as f64);
                loss = g.add(loss, s);
            }
        }
        loss
    }
}

fn crop_batch(clips: &[Waveform], order: &[usize], crop: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    order
        .iter()
        .map(|&i| {
            let clip = &clips[i];
            let start = if clip.len() > crop {
                rng.random_range(0..=clip.len() - crop)
            } else {
                0
            };
            clip.segment(start, start + crop).to_tensor()
        })
        .collect()
}

fn batch_loss_and_grads(model: &CodecModel, loss: &ReconLoss, batch: &[Tensor], want_grads: bool) -> (f64, Gradients) {
    let offset = model.encoder_params.len();
    let results = par::map_slice(batch, |x| {
        let mut g = Graph::new();
        let xin = g.constant(x.clone());
        let z = model.encoder.forward(&model.encoder_params.bind(0, want_grads), &mut g, xin);
        let y = model.decoder.forward(&model.decoder_params.bind(offset, want_grads), &mut g, z);
        let l = loss.build(&mut g, y, x);
        let value = g.value(l).get(0, 0);
        let grads = if want_grads { g.backward(l) } else { Gradients::default() };
        (value, grads)
    });
    let mut total = Gradients::default();
    let mut sum = 0.0;
    for (v, g) in &results {
        sum += v;
        total.merge(g);
    }
    total.scale(1.0 / batch.len() as f64);
    (sum / batch.len() as f64, total)
}

/// Trains the autoencoder on `clips`, then estimates the latent scale and
/// fits RVQ codebooks on the encoded training latents.
pub fn train_codec(clips: &[Waveform], config: &CodecConfig, train: &CodecTrainConfig) -> Result<(CodecModel, CodecTrainReport)> {
    ensure!(!clips.is_empty(), "codec training corpus is empty");
    ensure!(train.batch_size >= 1, "batch size must be positive");
    for c in clips {
        ensure!(
            c.num_channels() == config.audio_channels,
            "training clip has {} channels, codec expects {}",
            c.num_channels(),
            config.audio_channels
        );
    }
    let mut model = CodecModel::init(config.clone(), train.seed)?;
    let crop = config.padded_len(train.crop_len.max(1));
    let loss = ReconLoss::new(&train.fft_sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0xc0dec);

    let eval_n = clips.len().min(16);
    let eval_order: Vec<usize> = (0..eval_n).collect();
    let eval_batch = crop_batch(clips, &eval_order, crop, &mut ChaCha8Rng::seed_from_u64(train.seed ^ 0xe7a1));
    let (initial_loss, _) = batch_loss_and_grads(&model, &loss, &eval_batch, false);
    info!("codec: {} parameters, initial loss {initial_loss:.4}", model.num_parameters());

    let adam = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt_enc = AdamW::new(&model.encoder_params, adam);
    let mut opt_dec = AdamW::new(&model.decoder_params, adam);
    let offset = model.encoder_params.len();
    let mut epoch_losses = Vec::with_capacity(train.epochs);
    let steps_per_epoch = clips.len().div_ceil(train.batch_size);
    let total_steps = (train.epochs * steps_per_epoch).max(1);
    let mut step = 0usize;
    for epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(train.batch_size) {
            let batch = crop_batch(clips, chunk, crop, &mut rng);
            let (l, grads) = batch_loss_and_grads(&model, &loss, &batch, true);
            // Cosine decay to 10% of the base rate.
            let frac = step as f64 / total_steps as f64;
            let lr = train.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()));
            opt_enc.update(&mut model.encoder_params, &grads, 0, lr);
            opt_dec.update(&mut model.decoder_params, &grads, offset, lr);
            sum += l;
            step += 1;
        }
        let mean = sum / steps_per_epoch as f64;
        debug!("codec epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    let (final_loss, _) = batch_loss_and_grads(&model, &loss, &eval_batch, false);
    info!("codec: final loss {final_loss:.4}");

    let latents: Vec<Tensor> = par::map_slice(clips, |c| model.encode(c)).into_iter().collect::<Result<_>>()?;
    let sum_sq: f64 = latents.iter().map(|z| z.sum_sq()).sum();
    let count: usize = latents.iter().map(|z| z.len()).sum();
    let mean: f64 = latents.iter().map(|z| z.sum()).sum::<f64>() / count.max(1) as f64;
    let scale = (sum_sq / count.max(1) as f64 - mean * mean).max(0.0).sqrt();
    model.latent_scale = if scale > 0.0 { scale } else { 1.0 };

    if config.rvq_stages > 0 {
        let mut frames: Vec<Vec<f64>> = latents.iter().flat_map(|z| (0..z.cols()).map(|t| z.column(t))).collect();
        if frames.len() > train.kmeans_max_vectors {
            frames.shuffle(&mut rng);
            frames.truncate(train.kmeans_max_vectors);
        }
        model.codebooks = Codebooks::fit(
            &frames,
            config.rvq_stages,
            config.codebook_size,
            train.kmeans_iters,
            train.seed,
        )?;
    }
    model.trained = true;
    Ok((
        model,
        CodecTrainReport {
            initial_loss,
            final_loss,
            epoch_losses,
            latent_scale: scale,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CodecConfig {
        CodecConfig {
            compression_factor: 16,
            feature_channels: 4,
            rvq_stages: 2,
            codebook_size: 4,
            hidden_channels: 4,
            ..CodecConfig::default()
        }
    }

    #[test]
    fn strides_multiply_to_compression() {
        for cf in [1, 2, 3, 8, 12, 64, 100] {
            let c = CodecConfig {
                compression_factor: cf,
                ..CodecConfig::default()
            };
            assert_eq!(c.strides().iter().product::<usize>(), cf, "cf {cf}");
        }
        assert_eq!(CodecConfig::default().strides(), vec![4, 4, 4]);
    }

    #[test]
    fn shape_contracts() {
        let m = CodecModel::init(CodecConfig::default(), 1).unwrap();
        let z = m.encode(&Waveform::mono(8000, vec![0.0; 4 * 64])).unwrap();
        assert_eq!(z.shape(), (8, 4));
        let y = m.decode(&Tensor::zeros(8, 16)).unwrap();
        assert_eq!(y.len(), 1024);
        let odd = Waveform::mono(8000, vec![0.1; 1000]);
        let z = m.encode(&odd).unwrap();
        assert_eq!(z.cols(), 16);
        assert_eq!(m.decode(&z).unwrap().len(), 1024);
        assert!(m.encode(&Waveform::new(8000, vec![vec![0.0; 64]; 2]).unwrap()).is_err());
        assert!(m.decode(&Tensor::zeros(3, 4)).is_err());
    }

    #[test]
    fn stereo_and_odd_strides() {
        let cfg = CodecConfig {
            audio_channels: 2,
            compression_factor: 12,
            ..tiny()
        };
        let m = CodecModel::init(cfg, 2).unwrap();
        let z = m.encode(&Waveform::new(8000, vec![vec![0.2; 50]; 2]).unwrap()).unwrap();
        assert_eq!(z.shape(), (4, 5));
        assert_eq!(m.decode(&z).unwrap().num_channels(), 2);
        assert_eq!(m.decode(&z).unwrap().len(), 60);
    }

    #[test]
    fn normalization_round_trip() {
        let z = Tensor::from_fn(3, 5, |r, c| (r * 5 + c) as f64 - 7.0);
        let s = z.std();
        let n = normalize_latent(&z, s).unwrap();
        assert!((n.std() - 1.0).abs() < 1e-12);
        assert!(denormalize_latent(&n, s).unwrap().max_abs_diff(&z) < 1e-9);
        assert_eq!(normalize_latent(&Tensor::zeros(2, 2), 3.0).unwrap(), Tensor::zeros(2, 2));
        assert!(normalize_latent(&z, 0.0).is_err());
        assert!(normalize_latent(&z, -1.0).is_err());
    }

    fn toy_clips(n: usize, len: usize) -> Vec<Waveform> {
        (0..n)
            .map(|i| {
                let f = 200.0 + 37.0 * i as f64;
                Waveform::mono(
                    8000,
                    (0..len)
                        .map(|t| 0.5 * (2.0 * std::f64::consts::PI * f * t as f64 / 8000.0).sin())
                        .collect(),
                )
            })
            .collect()
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let clips = toy_clips(6, 512);
        let train = CodecTrainConfig {
            epochs: 6,
            batch_size: 3,
            crop_len: 256,
            kmeans_iters: 5,
            fft_sizes: vec![64],
            ..CodecTrainConfig::default()
        };
        let (m1, report) = train_codec(&clips, &tiny(), &train).unwrap();
        assert!(report.final_loss < report.initial_loss, "{report:?}");
        assert!(m1.trained);
        assert_eq!(m1.codebooks.num_stages(), 2);
        let (m2, _) = par::with_threads(1, || train_codec(&clips, &tiny(), &train)).unwrap();
        assert_eq!(m1.encoder_params.checksum(), m2.encoder_params.checksum());
        assert_eq!(m1.decoder_params.checksum(), m2.decoder_params.checksum());
        assert_eq!(m1.codebooks, m2.codebooks);
    }

    #[test]
    fn quantization_gating_and_errors() {
        let clips = toy_clips(2, 256);
        let cfg = CodecConfig {
            rvq_stages: 0,
            ..tiny()
        };
        let train = CodecTrainConfig {
            epochs: 1,
            crop_len: 128,
            fft_sizes: vec![32],
            ..CodecTrainConfig::default()
        };
        let (m, _) = train_codec(&clips, &cfg, &train).unwrap();
        assert!(!m.quantization_enabled());
        let z = m.encode(&clips[0]).unwrap();
        assert!(matches!(m.quantize(&z), Err(Error::Unsupported(_))));
        assert!(train_codec(&[], &cfg, &train).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let clips = toy_clips(2, 256);
        let train = CodecTrainConfig {
            epochs: 1,
            crop_len: 128,
            kmeans_iters: 2,
            fft_sizes: vec![32],
            ..CodecTrainConfig::default()
        };
        let (m, _) = train_codec(&clips, &tiny(), &train).unwrap();
        let back = CodecModel::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.encoder_params, m.encoder_params);
        assert_eq!(back.decoder_params, m.decoder_params);
        assert_eq!(back.codebooks, m.codebooks);
        assert_eq!(back.latent_scale, m.latent_scale as f32 as f64);
        assert!(back.trained);
        assert!(CodecModel::init(tiny(), 0).unwrap().require_trained().is_err());
    }
}
