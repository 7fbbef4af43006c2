//! Conditional 1-D U-Net velocity model `m(x_t, σ_t, C)`.
//!
//! Residual blocks (group norm, SiLU, conv, twice, plus skip) are modulated by
//! FiLM from a random-Fourier time embedding; the mixture latent `C` is
//! resampled to each conditioned level and merged with a 1×1 convolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{push_store, Checkpoint, Cursor, Kind};
use crate::error::{ensure, Error, Result};
use crate::nn::{Conv1d, ConvTranspose1d, GroupNorm, Linear};
use crate::params::{Bind, ParamStore};
use crate::tensor::{LatentTensor, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Latent feature channels `F` of both `x_t` and the condition.
    pub latent_channels: usize,
    pub depth: usize,
    pub base_channels: usize,
    /// Levels between channel doublings.
    pub channel_doubling_period: usize,
    /// `true` halves the time axis after that level.
    pub downsample_mask: Vec<bool>,
    pub attention_mask: Vec<bool>,
    /// `true` injects the condition at the start of that level.
    pub conditioning_mask: Vec<bool>,
    /// Number of random Fourier frequencies; the raw embedding has twice this.
    pub fourier_features: usize,
    pub time_embed_channels: usize,
    pub groups: usize,
    /// Seed of the frozen Fourier frequencies.
    pub fourier_seed: u64,
}

impl UNetConfig {
    /// Desk-scale default: four levels from 16 channels, downsampling at the
    /// last two, conditioning everywhere but the first, attention at the
    /// deepest level.
    pub fn toy(latent_channels: usize) -> Self {
        Self {
            latent_channels,
            depth: 4,
            base_channels: 16,
            channel_doubling_period: 2,
            downsample_mask: vec![false, false, true, true],
            attention_mask: vec![false, false, false, true],
            conditioning_mask: vec![false, true, true, true],
            fourier_features: 16,
            time_embed_channels: 64,
            groups: 8,
            fourier_seed: 0x5eed,
        }
    }

    /// The published configuration: seven levels from 128 to 1024 channels,
    /// six halvings (bottleneck 32 from 2048 frames), no conditioning on the
    /// first three levels, 1024 Fourier channels.
    pub fn paper() -> Self {
        Self {
            latent_channels: 128,
            depth: 7,
            base_channels: 128,
            channel_doubling_period: 2,
            downsample_mask: vec![false, true, true, true, true, true, true],
            attention_mask: vec![false, false, false, false, false, false, true],
            conditioning_mask: vec![false, false, false, true, true, true, true],
            fourier_features: 512,
            time_embed_channels: 512,
            groups: 8,
            fourier_seed: 0x5eed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.depth >= 1, "depth must be positive");
        ensure!(self.base_channels >= 1, "base_channels must be positive");
        ensure!(self.channel_doubling_period >= 1, "channel_doubling_period must be positive");
        ensure!(self.latent_channels >= 1, "latent_channels must be positive");
        ensure!(self.fourier_features >= 1, "fourier_features must be positive");
        ensure!(self.time_embed_channels >= 1, "time_embed_channels must be positive");
        ensure!(self.groups >= 1, "groups must be positive");
        for (name, m) in [
            ("downsample_mask", &self.downsample_mask),
            ("attention_mask", &self.attention_mask),
            ("conditioning_mask", &self.conditioning_mask),
        ] {
            ensure!(m.len() == self.depth, "{name} has {} entries, depth is {}", m.len(), self.depth);
        }
        Ok(())
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << (level / self.channel_doubling_period)
    }

    pub fn num_downsamples(&self) -> usize {
        self.downsample_mask.iter().filter(|&&d| d).count()
    }

    /// Time length at the bottleneck for an input of `d` frames; errors when
    /// the downsampling would reach zero.
    pub fn bottleneck_len(&self, d: usize) -> Result<usize> {
        let n = self.num_downsamples();
        ensure!(n < usize::BITS as usize && d >> n >= 1, "{d} frames cannot be halved {n} times");
        Ok(d >> n)
    }
}

/// Random Fourier features of σ followed by a 3-layer GELU MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    /// Frozen, log-uniform in [1, 1000].
    pub frequencies: Vec<f64>,
    layers: [Linear; 3],
}

impl TimeEmbedding {
    fn new(cfg: &UNetConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let mut frng = ChaCha8Rng::seed_from_u64(cfg.fourier_seed);
        let frequencies = (0..cfg.fourier_features)
            .map(|_| 10f64.powf(frng.random_range(0.0..3.0)))
            .map(|f| f as f32 as f64)
            .collect();
        let e = cfg.time_embed_channels;
        let layers = [
            Linear::new(store, "time.mlp0", rng, 2 * cfg.fourier_features, e),
            Linear::new(store, "time.mlp1", rng, e, e),
            Linear::new(store, "time.mlp2", rng, e, e),
        ];
        Self { frequencies, layers }
    }

    /// `[sin(2π f σ) …, cos(2π f σ) …]` as a column.
    pub fn fourier(&self, sigma: f64) -> Tensor {
        let n = self.frequencies.len();
        Tensor::from_fn(2 * n, 1, |r, _| {
            let arg = 2.0 * std::f64::consts::PI * self.frequencies[r % n] * sigma;
            if r < n {
                arg.sin()
            } else {
                arg.cos()
            }
        })
    }

    pub fn forward(&self, p: &Bind<'_>, g: &mut Graph, sigma: f64) -> Var {
        let mut h = g.constant(self.fourier(sigma));
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(p, g, h);
            if i < 2 {
                h = g.gelu(h);
            }
        }
        h
    }
}

/// Per-channel FiLM from the time embedding; the multiplier is `1 + scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Film {
    pub scale: Linear,
    pub shift: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv1d,
    pub norm2: GroupNorm,
    pub conv2: Conv1d,
    /// `None` when input and output widths match (identity skip).
    pub skip: Option<Conv1d>,
    pub film: Film,
    pub c_in: usize,
    pub c_out: usize,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, rng: &mut impl Rng, c_in: usize, c_out: usize, cfg: &UNetConfig) -> Self {
        let e = cfg.time_embed_channels;
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), c_in, cfg.groups),
            conv1: Conv1d::same(store, &format!("{name}.conv1"), rng, c_in, c_out, 3),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), c_out, cfg.groups),
            conv2: Conv1d::same(store, &format!("{name}.conv2"), rng, c_out, c_out, 3),
            skip: (c_in != c_out).then(|| Conv1d::same(store, &format!("{name}.skip"), rng, c_in, c_out, 1)),
            film: Film {
                scale: Linear::new(store, &format!("{name}.film.scale"), rng, e, c_out),
                shift: Linear::new(store, &format!("{name}.film.shift"), rng, e, c_out),
            },
            c_in,
            c_out,
        }
    }

    /// `FiLM(conv(SiLU(GN(conv(SiLU(GN(x)))))) + skip(x), temb)`.
    pub fn forward(&self, p: &Bind<'_>, g: &mut Graph, x: Var, temb: Var) -> Result<Var> {
        let c = g.value(x).rows();
        if c != self.c_in {
            return Err(Error::InvalidArgument(format!(
                "residual block expects {} channels, got {c}",
                self.c_in
            )));
        }
        let mut h = self.norm1.forward(p, g, x);
        h = g.silu(h);
        h = self.conv1.forward(p, g, h);
        h = self.norm2.forward(p, g, h);
        h = g.silu(h);
        h = self.conv2.forward(p, g, h);
        let s = match &self.skip {
            Some(conv) => conv.forward(p, g, x),
            None => x,
        };
        let sum = g.add(h, s);
        let scale = self.film.scale.forward(p, g, temb);
        let shift = self.film.shift.forward(p, g, temb);
        Ok(g.film(sum, scale, shift))
    }
}

/// Single-head self-attention over time with a pre-norm and residual.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub norm: GroupNorm,
    pub query: Conv1d,
    pub key: Conv1d,
    pub value: Conv1d,
    pub out: Conv1d,
    pub channels: usize,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, rng: &mut impl Rng, c: usize, groups: usize) -> Self {
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), c, groups),
            query: Conv1d::same(store, &format!("{name}.q"), rng, c, c, 1),
            key: Conv1d::same(store, &format!("{name}.k"), rng, c, c, 1),
            value: Conv1d::same(store, &format!("{name}.v"), rng, c, c, 1),
            out: Conv1d::same(store, &format!("{name}.out"), rng, c, c, 1),
            channels: c,
        }
    }

    pub fn forward(&self, p: &Bind<'_>, g: &mut Graph, x: Var) -> Var {
        let h = self.norm.forward(p, g, x);
        let q = self.query.forward(p, g, h);
        let k = self.key.forward(p, g, h);
        let v = self.value.forward(p, g, h);
        let qt = g.transpose(q);
        let scores = g.matmul(qt, k);
        let scores = g.scale(scores, 1.0 / (self.channels as f64).sqrt());
        let a = g.softmax_rows(scores);
        let at = g.transpose(a);
        let mixed = g.matmul(v, at);
        let o = self.out.forward(p, g, mixed);
        g.add(x, o)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderLevel {
    /// 1×1 merge of `[features; resampled condition]` back to the level input width.
    pub merge: Option<Conv1d>,
    pub block: ResBlock,
    pub attention: Option<Attention>,
    pub down: Option<Conv1d>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderLevel {
    pub up: Option<ConvTranspose1d>,
    pub block: ResBlock,
    pub attention: Option<Attention>,
}

/// The generator: configuration, frozen Fourier frequencies and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel {
    pub config: UNetConfig,
    pub time: TimeEmbedding,
    pub input: Conv1d,
    pub encoder: Vec<EncoderLevel>,
    pub middle: ResBlock,
    pub decoder: Vec<DecoderLevel>,
    pub out_norm: GroupNorm,
    pub output: Conv1d,
    pub params: ParamStore,
}

impl GeneratorModel {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = &config;
        let time = TimeEmbedding::new(cfg, &mut store, &mut rng);
        let c0 = cfg.level_channels(0);
        let input = Conv1d::same(&mut store, "input", &mut rng, cfg.latent_channels, c0, 3);
        let mut encoder = Vec::with_capacity(cfg.depth);
        let mut c_prev = c0;
        for i in 0..cfg.depth {
            let c = cfg.level_channels(i);
            let merge = cfg.conditioning_mask[i].then(|| {
                Conv1d::same(&mut store, &format!("enc{i}.merge"), &mut rng, c_prev + cfg.latent_channels, c_prev, 1)
            });
            let block = ResBlock::new(&mut store, &format!("enc{i}.block"), &mut rng, c_prev, c, cfg);
            let attention = cfg.attention_mask[i].then(|| Attention::new(&mut store, &format!("enc{i}.attn"), &mut rng, c, cfg.groups));
            let down = cfg.downsample_mask[i].then(|| Conv1d::new(&mut store, &format!("enc{i}.down"), &mut rng, c, c, 1, 2, 0));
            encoder.push(EncoderLevel {
                merge,
                block,
                attention,
                down,
            });
            c_prev = c;
        }
        let middle = ResBlock::new(&mut store, "middle", &mut rng, c_prev, c_prev, cfg);
        let mut decoder = Vec::with_capacity(cfg.depth);
        for i in (0..cfg.depth).rev() {
            let c = cfg.level_channels(i);
            let up = cfg.downsample_mask[i]
                .then(|| ConvTranspose1d::new(&mut store, &format!("dec{i}.up"), &mut rng, c_prev, c_prev, 2, 2, 0));
            let block = ResBlock::new(&mut store, &format!("dec{i}.block"), &mut rng, c_prev + c, c, cfg);
            let attention = cfg.attention_mask[i].then(|| Attention::new(&mut store, &format!("dec{i}.attn"), &mut rng, c, cfg.groups));
            decoder.push(DecoderLevel { up, block, attention });
            c_prev = c;
        }
        let out_norm = GroupNorm::new(&mut store, "out.norm", c0, cfg.groups);
        let output = Conv1d::same(&mut store, "out.conv", &mut rng, c0, cfg.latent_channels, 3);
        Ok(Self {
            config,
            time,
            input,
            encoder,
            middle,
            decoder,
            out_norm,
            output,
            params: store,
        })
    }

    /// Exact number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn embed_time(&self, sigma: f64) -> Result<Vec<f64>> {
        check_sigma(sigma)?;
        let mut g = Graph::new();
        let e = self.time.forward(&self.params.bind(0, false), &mut g, sigma);
        Ok(g.value(e).data().to_vec())
    }

    /// Resamples `cond` to the level length, concatenates it to `h` and merges
    /// back to `h`'s width.
    pub fn inject_conditioning(&self, p: &Bind<'_>, g: &mut Graph, level: usize, h: Var, cond: Var) -> Result<Var> {
        let lvl = self
            .encoder
            .get(level)
            .ok_or_else(|| Error::InvalidArgument(format!("level {level} out of range")))?;
        let merge = lvl
            .merge
            .as_ref()
            .ok_or_else(|| Error::Unsupported(format!("level {level} is not conditioned")))?;
        let len = g.value(h).cols();
        let c = g.resample_cols(cond, len);
        let cat = g.concat_rows(&[h, c]);
        Ok(merge.forward(p, g, cat))
    }

    /// Builds the forward pass on `g`. `cond` may itself be a differentiable
    /// node (the trainer feeds the conditioner encoder's output).
    pub fn forward_graph(&self, p: &Bind<'_>, g: &mut Graph, x: Var, sigma: f64, cond: Var) -> Result<Var> {
        check_sigma(sigma)?;
        let (f, d) = g.value(x).shape();
        ensure!(f == self.config.latent_channels, "input has {f} channels, model expects {}", self.config.latent_channels);
        ensure!(
            g.value(cond).rows() == self.config.latent_channels,
            "condition has {} channels, model expects {}",
            g.value(cond).rows(),
            self.config.latent_channels
        );
        self.config.bottleneck_len(d)?;
        let temb = self.time.forward(p, g, sigma);
        let mut h = self.input.forward(p, g, x);
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (i, lvl) in self.encoder.iter().enumerate() {
            if lvl.merge.is_some() {
                h = self.inject_conditioning(p, g, i, h, cond)?;
            }
            h = lvl.block.forward(p, g, h, temb)?;
            if let Some(a) = &lvl.attention {
                h = a.forward(p, g, h);
            }
            skips.push(h);
            if let Some(down) = &lvl.down {
                h = down.forward(p, g, h);
            }
        }
        h = self.middle.forward(p, g, h, temb)?;
        for lvl in &self.decoder {
            let skip = skips.pop().expect("one skip per level");
            if let Some(up) = &lvl.up {
                h = up.forward(p, g, h);
                // Odd lengths round up on the way down; trim back.
                let len = g.value(skip).cols();
                if g.value(h).cols() != len {
                    h = g.slice_cols(h, 0, len);
                }
            }
            let cat = g.concat_rows(&[h, skip]);
            h = lvl.block.forward(p, g, cat, temb)?;
            if let Some(a) = &lvl.attention {
                h = a.forward(p, g, h);
            }
        }
        h = self.out_norm.forward(p, g, h);
        h = g.silu(h);
        Ok(self.output.forward(p, g, h))
    }

    /// Predicted velocity `v̂ = m(x_t, σ, C)`, same shape as `x_t`.
    pub fn forward(&self, x_t: &LatentTensor, sigma: f64, cond: &LatentTensor) -> Result<LatentTensor> {
        ensure!(
            x_t.shape() == cond.shape(),
            "x_t is {:?} but condition is {:?}",
            x_t.shape(),
            cond.shape()
        );
        x_t.ensure_finite("x_t")?;
        let mut g = Graph::new();
        let x = g.constant(x_t.clone());
        let c = g.constant(cond.clone());
        let y = self.forward_graph(&self.params.bind(0, false), &mut g, x, sigma, c)?;
        Ok(g.value(y).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::new(Kind::Generator);
        let mask = |m: &[bool]| m.iter().enumerate().fold(0u64, |acc, (i, &b)| acc | ((b as u64) << i));
        ck.ints = vec![
            c.latent_channels as u64,
            c.depth as u64,
            c.base_channels as u64,
            c.channel_doubling_period as u64,
            mask(&c.downsample_mask),
            mask(&c.attention_mask),
            mask(&c.conditioning_mask),
            c.fourier_features as u64,
            c.time_embed_channels as u64,
            c.groups as u64,
            c.fourier_seed,
        ];
        ck.tensors.push(Tensor::from_vec(1, self.time.frequencies.len(), self.time.frequencies.clone()).expect("frequency row"));
        push_store(&mut ck, &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(Kind::Generator)?;
        let mut cur = Cursor::new(ck);
        let latent_channels = cur.usize()?;
        let depth = cur.usize()?;
        ensure!(depth <= 64, "checkpoint depth {depth} is implausible");
        let base_channels = cur.usize()?;
        let channel_doubling_period = cur.usize()?;
        let unmask = |bits: u64| (0..depth).map(|i| bits >> i & 1 == 1).collect::<Vec<_>>();
        let config = UNetConfig {
            latent_channels,
            depth,
            base_channels,
            channel_doubling_period,
            downsample_mask: unmask(cur.int()?),
            attention_mask: unmask(cur.int()?),
            conditioning_mask: unmask(cur.int()?),
            fourier_features: cur.usize()?,
            time_embed_channels: cur.usize()?,
            groups: cur.usize()?,
            fourier_seed: cur.int()?,
        };
        let mut model = Self::new(config, 0)?;
        let freqs = cur.tensor()?;
        ensure!(
            freqs.len() == model.time.frequencies.len(),
            "checkpoint has {} Fourier frequencies, config expects {}",
            freqs.len(),
            model.time.frequencies.len()
        );
        model.time.frequencies = freqs.data().to_vec();
        cur.fill(&mut model.params)?;
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

fn check_sigma(sigma: f64) -> Result<()> {
    ensure!((0.0..=1.0).contains(&sigma), "sigma {sigma} outside [0, 1]");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNetConfig {
        UNetConfig {
            base_channels: 4,
            groups: 2,
            fourier_features: 4,
            time_embed_channels: 6,
            ..UNetConfig::toy(3)
        }
    }

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn shape_finiteness_determinism() {
        let m = GeneratorModel::new(UNetConfig::toy(8), 1).unwrap();
        let x = rand_tensor(8, 32, 2);
        let c = rand_tensor(8, 32, 3);
        let y = m.forward(&x, 0.4, &c).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.is_finite());
        assert_eq!(m.forward(&x, 0.4, &c).unwrap(), y);
        let y0 = m.forward(&x, 0.0, &c).unwrap();
        let y1 = m.forward(&x, 1.0, &c).unwrap();
        assert!(y0.sub(&y1).unwrap().norm() > 0.0);
    }

    #[test]
    fn odd_lengths_are_preserved() {
        let m = GeneratorModel::new(tiny(), 1).unwrap();
        for d in [4, 5, 7, 13] {
            let x = rand_tensor(3, d, d as u64);
            assert_eq!(m.forward(&x, 0.5, &x).unwrap().shape(), (3, d));
        }
        assert!(m.forward(&rand_tensor(3, 3, 0), 0.5, &rand_tensor(3, 3, 1)).is_err());
    }

    #[test]
    fn invalid_inputs() {
        let m = GeneratorModel::new(tiny(), 1).unwrap();
        let x = rand_tensor(3, 8, 0);
        assert!(m.forward(&x, 1.5, &x).is_err());
        assert!(m.forward(&x, -0.1, &x).is_err());
        assert!(m.forward(&x, 0.5, &rand_tensor(3, 9, 0)).is_err());
        assert!(m.forward(&rand_tensor(2, 8, 0), 0.5, &rand_tensor(2, 8, 0)).is_err());
        assert!(m.embed_time(1.01).is_err());
        let bad = UNetConfig {
            attention_mask: vec![true],
            ..tiny()
        };
        assert!(GeneratorModel::new(bad, 0).is_err());
    }

    #[test]
    fn time_embedding() {
        let m = GeneratorModel::new(tiny(), 1).unwrap();
        let f = m.time.fourier(0.0);
        let n = m.time.frequencies.len();
        assert!(f.data()[..n].iter().all(|&v| v == 0.0));
        assert!(f.data()[n..].iter().all(|&v| v == 1.0));
        assert!(m.time.frequencies.iter().all(|&f| (1.0..=1000.0).contains(&f)));
        assert_eq!(m.embed_time(0.3).unwrap(), m.embed_time(0.3).unwrap());
        assert_eq!(m.embed_time(0.3).unwrap().len(), 6);
        // Lipschitz sanity: |Δσ| · 2π·max f bounds the Fourier change; each
        // layer amplifies by at most its Frobenius norm (GELU is ~1-Lipschitz).
        let a = m.embed_time(0.3).unwrap();
        let b = m.embed_time(0.3 + 1e-6).unwrap();
        let dist = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let fmax = m.time.frequencies.iter().cloned().fold(0.0, f64::max);
        let input = 1e-6 * 2.0 * std::f64::consts::PI * fmax * (2.0 * n as f64).sqrt();
        let gain: f64 = m.time.layers.iter().map(|l| m.params.get(l.weight).norm() * 1.13).product();
        assert!(dist > 0.0 && dist <= 10.0 * input * gain, "{dist} vs {input} × {gain}");
    }

    fn zero_block(m: &mut GeneratorModel, block: &ResBlock) {
        for id in [block.conv1.weight, block.conv1.bias, block.conv2.weight, block.conv2.bias] {
            m.params.get_mut(id).data_mut().fill(0.0);
        }
        for id in [block.film.scale.weight, block.film.scale.bias, block.film.shift.weight] {
            m.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn degenerate_residual_block() {
        let mut m = GeneratorModel::new(tiny(), 1).unwrap();
        let block = m.middle.clone();
        assert!(block.skip.is_none());
        zero_block(&mut m, &block);
        let shift_bias = block.film.shift.bias;
        m.params.get_mut(shift_bias).data_mut().fill(0.0);
        let x = rand_tensor(block.c_in, 9, 4);
        let run = |m: &GeneratorModel| {
            let mut g = Graph::new();
            let p = m.params.bind(0, false);
            let xv = g.constant(x.clone());
            let t = m.time.forward(&p, &mut g, 0.7);
            let y = block.forward(&p, &mut g, xv, t).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(&m), x);
        m.params.get_mut(shift_bias).data_mut().fill(1.0);
        assert!(run(&m).max_abs_diff(&x.map(|v| v + 1.0)) < 1e-15);
        let mut g = Graph::new();
        let p = m.params.bind(0, false);
        let bad = g.constant(rand_tensor(block.c_in + 1, 9, 4));
        let t = m.time.forward(&p, &mut g, 0.7);
        assert!(matches!(block.forward(&p, &mut g, bad, t), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn conditioning_injection() {
        let mut m = GeneratorModel::new(tiny(), 1).unwrap();
        let x = rand_tensor(3, 16, 1);
        let c1 = rand_tensor(3, 16, 2);
        let c2 = rand_tensor(3, 16, 3);
        assert!(m.forward(&x, 0.5, &c1).unwrap() != m.forward(&x, 0.5, &c2).unwrap());

        // Unconditioned levels reject injection; identity resampling; length matching.
        let p = m.params.bind(0, false);
        let mut g = Graph::new();
        let h = g.constant(rand_tensor(4, 8, 5));
        let c = g.constant(rand_tensor(3, 32, 6));
        assert!(matches!(m.inject_conditioning(&p, &mut g, 0, h, c), Err(Error::Unsupported(_))));
        let out = m.inject_conditioning(&p, &mut g, 1, h, c).unwrap();
        assert_eq!(g.value(out).shape(), (4, 8));

        // Zeroing the condition half of every merge makes the output ignore C.
        let merges: Vec<_> = m.encoder.iter().filter_map(|l| l.merge.clone()).collect();
        for merge in merges {
            let w = m.params.get_mut(merge.weight);
            let c_h = merge.c_out;
            for r in 0..w.rows() {
                for col in c_h..w.cols() {
                    w.set(r, col, 0.0);
                }
            }
        }
        assert_eq!(m.forward(&x, 0.5, &c1).unwrap(), m.forward(&x, 0.5, &c2).unwrap());

        let uncond = GeneratorModel::new(
            UNetConfig {
                conditioning_mask: vec![false; 4],
                ..tiny()
            },
            1,
        )
        .unwrap();
        assert_eq!(uncond.forward(&x, 0.5, &c1).unwrap(), uncond.forward(&x, 0.5, &c2).unwrap());
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let m = GeneratorModel::new(tiny(), 3).unwrap();
        let attn = m.encoder[3].attention.clone().unwrap();
        let x = rand_tensor(attn.channels, 7, 9);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let permuted = Tensor::from_fn(x.rows(), 7, |r, c| x.get(r, perm[c]));
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let y = attn.forward(&m.params.bind(0, false), &mut g, v);
            g.value(y).clone()
        };
        let y = run(&x);
        let yp = run(&permuted);
        assert_eq!(yp.shape(), x.shape());
        let expect = Tensor::from_fn(x.rows(), 7, |r, c| y.get(r, perm[c]));
        assert!(yp.max_abs_diff(&expect) < 1e-12);
    }

    /// Conv weights `c_out·c_in·k + c_out`; everything else by hand.
    fn expected_params(cfg: &UNetConfig) -> usize {
        let conv = |i: usize, o: usize, k: usize| o * i * k + o;
        let lin = |i: usize, o: usize| o * i + o;
        let gn = |c: usize| 2 * c;
        let e = cfg.time_embed_channels;
        let res = |i: usize, o: usize| {
            gn(i) + conv(i, o, 3) + gn(o) + conv(o, o, 3) + if i == o { 0 } else { conv(i, o, 1) } + 2 * lin(e, o)
        };
        let attn = |c: usize| gn(c) + 4 * conv(c, c, 1);
        let f = cfg.latent_channels;
        let ch = |l: usize| cfg.base_channels * 2usize.pow((l / cfg.channel_doubling_period) as u32);
        let mut n = lin(2 * cfg.fourier_features, e) + 2 * lin(e, e) + conv(f, ch(0), 3);
        let mut prev = ch(0);
        for l in 0..cfg.depth {
            if cfg.conditioning_mask[l] {
                n += conv(prev + f, prev, 1);
            }
            n += res(prev, ch(l));
            if cfg.attention_mask[l] {
                n += attn(ch(l));
            }
            if cfg.downsample_mask[l] {
                n += conv(ch(l), ch(l), 1);
            }
            prev = ch(l);
        }
        n += res(prev, prev);
        for l in (0..cfg.depth).rev() {
            if cfg.downsample_mask[l] {
                n += prev * prev * 2 + prev;
            }
            n += res(prev + ch(l), ch(l));
            if cfg.attention_mask[l] {
                n += attn(ch(l));
            }
            prev = ch(l);
        }
        n + gn(ch(0)) + conv(ch(0), f, 3)
    }

    #[test]
    fn parameter_count_matches_formula() {
        let toy = UNetConfig::toy(8);
        let m = GeneratorModel::new(toy.clone(), 0).unwrap();
        assert_eq!(m.count_parameters(), expected_params(&toy));
        assert_eq!(GeneratorModel::new(toy.clone(), 99).unwrap().count_parameters(), m.count_parameters());
        let wide = UNetConfig {
            base_channels: 32,
            ..toy.clone()
        };
        let ratio = GeneratorModel::new(wide, 0).unwrap().count_parameters() as f64 / m.count_parameters() as f64;
        assert!(ratio > 2.5 && ratio < 4.0, "ratio {ratio}");
        assert_eq!(ParamStore::new().num_scalars(), 0);
        let paper = UNetConfig::paper();
        assert_eq!(paper.level_channels(6), 1024);
        assert_eq!(paper.bottleneck_len(2048).unwrap(), 32);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = GeneratorModel::new(tiny(), 5).unwrap();
        let back = GeneratorModel::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
