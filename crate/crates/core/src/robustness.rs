//! Noise-robustness study of the codec: how much does reconstruction SDR
//! suffer when Gaussian noise hits the signal at different points of the
//! encode → quantize → decode chain?

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::codec::CodecModel;
use crate::diffusion::standard_normal;
use crate::error::{ensure, Error, Result};
use crate::metrics::sdr;
use crate::par::{self, derive_seed};
use crate::rvq::QuantizedLatent;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    /// Noise on the waveform itself.
    Identity,
    /// Noise on the continuous latent, no quantization.
    Nq,
    /// Noise on the latent before quantization.
    Bq,
    /// Noise on the quantized representation.
    Aq,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [Experiment::Identity, Experiment::Nq, Experiment::Bq, Experiment::Aq];

    pub fn label(self) -> &'static str {
        match self {
            Experiment::Identity => "Identity",
            Experiment::Nq => "NQ",
            Experiment::Bq => "BQ",
            Experiment::Aq => "AQ",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown experiment {s:?} (expected Identity, NQ, BQ or AQ)")))
    }

    fn stream(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// How noise is put onto the quantized representation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AqMode {
    /// Noise on the integer code indices (deviation matched to the indices'
    /// std), then cast back toward zero and clamped to the codebook, like an
    /// integer tensor cast.
    #[default]
    IndexTruncate,
    /// As `IndexTruncate` but rounding to the nearest index.
    IndexRound,
    /// Noise on the de-quantized embedding (sum of codewords), re-snapped to
    /// the nearest codes.
    Embedding,
}

impl AqMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "index_truncate" => Ok(Self::IndexTruncate),
            "index_round" => Ok(Self::IndexRound),
            "embedding" => Ok(Self::Embedding),
            _ => Err(Error::invalid(format!(
                "unknown AQ mode {s:?} (expected index_truncate, index_round or embedding)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustnessConfig {
    /// Noise deviations relative to the std of the contaminated
    /// representation; strictly ascending.
    pub noise_stds: Vec<f64>,
    pub experiments: Vec<Experiment>,
    pub seed: u64,
    pub aq_mode: AqMode,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            noise_stds: vec![0.0, 1e-6, 1e-3, 0.01, 0.1, 1.0],
            experiments: Experiment::ALL.to_vec(),
            seed: 0,
            aq_mode: AqMode::default(),
        }
    }
}

impl RobustnessConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.noise_stds.is_empty(), "no noise deviations requested");
        ensure!(
            self.noise_stds.iter().all(|s| s.is_finite() && *s >= 0.0),
            "noise deviations must be finite and non-negative"
        );
        ensure!(
            self.noise_stds.windows(2).all(|w| w[0] < w[1]),
            "noise deviations must be sorted ascending without repeats"
        );
        ensure!(!self.experiments.is_empty(), "no experiments requested");
        for (i, e) in self.experiments.iter().enumerate() {
            ensure!(!self.experiments[..i].contains(e), "experiment {e} requested twice");
        }
        Ok(())
    }
}

fn add_noise(t: &Tensor, std: f64, rng: &mut impl Rng) -> Tensor {
    if std == 0.0 {
        return t.clone();
    }
    let dev = std * t.std();
    let n = standard_normal(t.rows(), t.cols(), rng);
    t.zip_map(&n, |x, e| x + dev * e).expect("same shape")
}

fn require_quantizer(codec: &CodecModel) -> Result<()> {
    codec.require_trained()?;
    if codec.quantization_enabled() {
        Ok(())
    } else {
        Err(Error::Unsupported("the codec has no quantizer (rvq_stages = 0)".into()))
    }
}

fn decoded_sdr(codec: &CodecModel, x: &Waveform, z: &Tensor) -> Result<f64> {
    sdr(x, &codec.decode(z)?.resized(x.len()))
}

/// `SDR(x, x + ε)` with `ε ~ N(0, (std · std(x))²)`.
pub fn run_identity(x: &Waveform, std: f64, rng: &mut impl Rng) -> Result<f64> {
    let noisy = Waveform::from_tensor(x.sample_rate, &add_noise(&x.to_tensor(), std, rng));
    sdr(x, &noisy)
}

/// `SDR(x, dE(E(x) + ε))`.
pub fn run_nq(codec: &CodecModel, x: &Waveform, std: f64, rng: &mut impl Rng) -> Result<f64> {
    codec.require_trained()?;
    let z = add_noise(&codec.encode(x)?, std, rng);
    decoded_sdr(codec, x, &z)
}

/// `SDR(x, dE(dQ(Q(E(x) + ε))))`.
pub fn run_bq(codec: &CodecModel, x: &Waveform, std: f64, rng: &mut impl Rng) -> Result<f64> {
    require_quantizer(codec)?;
    let z = add_noise(&codec.encode(x)?, std, rng);
    decoded_sdr(codec, x, &codec.dequantize(&codec.quantize(&z)?)?)
}

/// Contaminates code indices: noise deviation matched to the indices' std,
/// then cast back to valid indices.
pub fn perturb_indices(q: &QuantizedLatent, size: usize, std: f64, round: bool, rng: &mut impl Rng) -> Result<QuantizedLatent> {
    ensure!(size >= 1, "codebook size must be positive");
    if std == 0.0 {
        return Ok(q.clone());
    }
    let rows: Vec<Vec<f64>> = q.indices.iter().map(|r| r.iter().map(|&i| i as f64).collect()).collect();
    let t = Tensor::from_rows(&rows)?;
    let noisy = add_noise(&t, std, rng);
    let max = (size - 1) as f64;
    let cast = |v: f64| if round { v.round() } else { v.trunc() }.clamp(0.0, max) as usize;
    Ok(QuantizedLatent {
        indices: (0..noisy.rows()).map(|r| noisy.row(r).iter().map(|&v| cast(v)).collect()).collect(),
    })
}

/// `SDR(x, dE(dQ(Q(E(x)) + ε)))`, with the contamination interpreted by `mode`.
pub fn run_aq(codec: &CodecModel, x: &Waveform, std: f64, mode: AqMode, rng: &mut impl Rng) -> Result<f64> {
    require_quantizer(codec)?;
    let q = codec.quantize(&codec.encode(x)?)?;
    let z = match mode {
        AqMode::IndexTruncate | AqMode::IndexRound => {
            let noisy = perturb_indices(&q, codec.codebooks.size(), std, mode == AqMode::IndexRound, rng)?;
            codec.dequantize(&noisy)?
        }
        AqMode::Embedding => {
            let e = codec.dequantize(&q)?;
            if std == 0.0 {
                e
            } else {
                codec.dequantize(&codec.quantize(&add_noise(&e, std, rng))?)?
            }
        }
    };
    decoded_sdr(codec, x, &z)
}

/// Runs one experiment on one clip.
pub fn run_experiment(
    experiment: Experiment,
    codec: &CodecModel,
    x: &Waveform,
    std: f64,
    mode: AqMode,
    rng: &mut impl Rng,
) -> Result<f64> {
    match experiment {
        Experiment::Identity => run_identity(x, std, rng),
        Experiment::Nq => run_nq(codec, x, std, rng),
        Experiment::Bq => run_bq(codec, x, std, rng),
        Experiment::Aq => run_aq(codec, x, std, mode, rng),
    }
}

/// Seed of one (experiment, std, track) cell; independent of which other
/// cells are requested.
pub fn cell_seed(seed: u64, experiment: Experiment, std: f64, track: usize) -> u64 {
    derive_seed(derive_seed(derive_seed(seed, experiment.stream()), std.to_bits()), track as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub experiment: Experiment,
    pub std: f64,
    pub track: usize,
    pub sdr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub noise_stds: Vec<f64>,
    pub experiments: Vec<Experiment>,
    /// Mean SDR in dB, `grid[experiment][std]`.
    pub grid: Vec<Vec<f64>>,
    pub per_track: Vec<TrackResult>,
    /// Size of the contaminated representation per experiment: audio
    /// channels, latent features, or quantizer stages.
    pub feature_sizes: Vec<usize>,
}

impl RobustnessReport {
    pub fn curve(&self, e: Experiment) -> Option<&[f64]> {
        let i = self.experiments.iter().position(|&x| x == e)?;
        Some(&self.grid[i])
    }

    pub fn cell(&self, e: Experiment, std: f64) -> Option<f64> {
        let j = self.noise_stds.iter().position(|&s| s == std)?;
        self.curve(e).map(|c| c[j])
    }

    /// Largest rise of the curve between consecutive deviations (0 when it
    /// never goes up).
    pub fn max_rise(&self, e: Experiment) -> Option<f64> {
        self.curve(e).map(|c| c.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max))
    }

    /// Drop from the noiseless score at every deviation.
    pub fn drops(&self, e: Experiment) -> Option<Vec<f64>> {
        self.curve(e).map(|c| c.iter().map(|v| c[0] - v).collect())
    }

    /// Among `among`, the experiments that first drop by more than
    /// `threshold` dB, with the deviation at which it happens.
    pub fn first_to_drop(&self, among: &[Experiment], threshold: f64) -> Option<(f64, Vec<Experiment>)> {
        for (j, &s) in self.noise_stds.iter().enumerate() {
            let hit: Vec<Experiment> = among
                .iter()
                .copied()
                .filter(|&e| self.drops(e).is_some_and(|d| d[j] > threshold))
                .collect();
            if !hit.is_empty() {
                return Some((s, hit));
            }
        }
        None
    }

    /// Rows are deviations, columns experiments; the last row holds the
    /// feature sizes.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["std".to_string()];
        header.extend(self.experiments.iter().map(|e| e.label().to_string()));
        w.write_record(&header)?;
        for (j, s) in self.noise_stds.iter().enumerate() {
            let mut row = vec![format!("{s:e}")];
            row.extend(self.grid.iter().map(|c| format!("{:.4}", c[j])));
            w.write_record(&row)?;
        }
        let mut footer = vec!["features".to_string()];
        footer.extend(self.feature_sizes.iter().map(|n| n.to_string()));
        w.write_record(&footer)?;
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, csv_path: impl AsRef<Path>, json_path: impl AsRef<Path>) -> Result<()> {
        let (c, j) = (csv_path.as_ref(), json_path.as_ref());
        std::fs::write(c, self.to_csv()?).map_err(|e| Error::io(c, e))?;
        std::fs::write(j, self.to_json()?).map_err(|e| Error::io(j, e))
    }
}

/// Runs every requested (experiment, std) cell over all clips and averages
/// the SDR per cell. Cells run in parallel; each has its own seed.
pub fn run_table(cfg: &RobustnessConfig, codec: &CodecModel, clips: &[Waveform]) -> Result<RobustnessReport> {
    cfg.validate()?;
    ensure!(!clips.is_empty(), "robustness study needs at least one clip");
    if cfg.experiments.iter().any(|&e| e != Experiment::Identity) {
        codec.require_trained()?;
    }
    if cfg.experiments.iter().any(|&e| matches!(e, Experiment::Bq | Experiment::Aq)) {
        require_quantizer(codec)?;
    }
    let (ne, ns, nt) = (cfg.experiments.len(), cfg.noise_stds.len(), clips.len());
    let results = par::map_indexed(ne * ns * nt, |k| {
        let (e, rest) = (k / (ns * nt), k % (ns * nt));
        let (s, t) = (rest / nt, rest % nt);
        let (exp, std) = (cfg.experiments[e], cfg.noise_stds[s]);
        let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(cfg.seed, exp, std, t));
        run_experiment(exp, codec, &clips[t], std, cfg.aq_mode, &mut rng).map(|sdr_db| TrackResult {
            experiment: exp,
            std,
            track: t,
            sdr_db,
        })
    });
    let per_track = results.into_iter().collect::<Result<Vec<_>>>()?;
    let grid = (0..ne)
        .map(|e| {
            (0..ns)
                .map(|s| {
                    let cell = &per_track[(e * ns + s) * nt..(e * ns + s + 1) * nt];
                    cell.iter().map(|r| r.sdr_db).sum::<f64>() / nt as f64
                })
                .collect()
        })
        .collect();
    let feature_sizes = cfg
        .experiments
        .iter()
        .map(|e| match e {
            Experiment::Identity => codec.config.audio_channels,
            Experiment::Nq | Experiment::Bq => codec.config.feature_channels,
            Experiment::Aq => codec.config.rvq_stages,
        })
        .collect();
    Ok(RobustnessReport {
        noise_stds: cfg.noise_stds.clone(),
        experiments: cfg.experiments.clone(),
        grid,
        per_track,
        feature_sizes,
    })
}
