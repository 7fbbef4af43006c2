//! Command-line surface. Field names double as config-file keys; every
//! flag can also come from a `LATSEP_*` environment variable.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

/// Latent-diffusion vocal separation on a toy music corpus.
///
/// Settings are layered, later wins: built-in defaults, `--preset`,
/// `--config` file, `LATSEP_*` environment variables, command-line flags.
/// Config files are JSON objects keyed by the flag names with underscores
/// (`lr_stage1`), either flat or nested under the subcommand name
/// (`{"train": {...}}`).
#[derive(Debug, Parser)]
#[command(name = "latsep", version, propagate_version = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a toy corpus of vocals/accompaniment/mixture stems.
    GenData(GenDataArgs),
    /// Train the latent codec (autoencoder + residual quantizer).
    TrainCodec(TrainCodecArgs),
    /// Two-stage training of the diffusion generator.
    Train(TrainArgs),
    /// Separate vocals from a mixture file or a corpus split.
    Separate(SeparateArgs),
    /// Score separated vocals against references.
    Evaluate(EvaluateArgs),
    /// Codec noise-robustness study.
    Robustness(RobustnessArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::TrainCodec(_) => "train-codec",
            Command::Train(_) => "train",
            Command::Separate(_) => "separate",
            Command::Evaluate(_) => "evaluate",
            Command::Robustness(_) => "robustness",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Desk-scale toy configuration.
    Toy,
    /// Full-scale configuration; recorded for reference, far too slow on a CPU.
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Toy,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Valid,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct Common {
    /// Master random seed.
    #[arg(long, env = "LATSEP_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (0 = all cores; 1 = fully deterministic scheduling).
    #[arg(long, env = "LATSEP_THREADS", default_value_t = 0)]
    pub threads: usize,
    /// JSON config file; flags and environment variables override it [default: none].
    #[arg(long, env = "LATSEP_CONFIG")]
    pub config: Option<PathBuf>,
    /// Base configuration the other settings refine.
    #[arg(long, env = "LATSEP_PRESET", value_enum, default_value_t = Preset::Toy)]
    pub preset: Preset,
    /// Also write the JSON run summary here; it always goes to stdout [default: none].
    #[arg(long, env = "LATSEP_SUMMARY")]
    pub summary: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Output directory for WAV stems and manifest.json.
    #[arg(long, env = "LATSEP_OUT", default_value = "data")]
    pub out: PathBuf,
    /// Number of tracks (10% go to the validation split).
    #[arg(long, env = "LATSEP_TRACKS", default_value_t = 200)]
    pub tracks: usize,
    /// Track length in seconds.
    #[arg(long, env = "LATSEP_DURATION", default_value_t = 3.0)]
    pub duration: f64,
    #[arg(long, env = "LATSEP_SAMPLE_RATE", default_value_t = 8000)]
    pub sample_rate: u32,
    /// Audio channels (1 or 2).
    #[arg(long, env = "LATSEP_CHANNELS", default_value_t = 1)]
    pub channels: usize,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct TrainCodecArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Corpus directory (with manifest.json).
    #[arg(long, env = "LATSEP_DATA", default_value = "data")]
    pub data: PathBuf,
    /// Codec checkpoint to write.
    #[arg(long, env = "LATSEP_OUT", default_value = "codec.ckpt")]
    pub out: PathBuf,
    #[arg(long, env = "LATSEP_EPOCHS", default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, env = "LATSEP_BATCH_SIZE", default_value_t = 8)]
    pub batch_size: usize,
    /// Training crop length in samples.
    #[arg(long, env = "LATSEP_CROP_LEN", default_value_t = 4096)]
    pub crop_len: usize,
    #[arg(long, env = "LATSEP_LR", default_value_t = 2e-3)]
    pub lr: f64,
    #[arg(long, env = "LATSEP_KMEANS_ITERS", default_value_t = 15)]
    pub kmeans_iters: usize,
    /// Latent frames sampled for codebook fitting.
    #[arg(long, env = "LATSEP_KMEANS_MAX_VECTORS", default_value_t = 40_000)]
    pub kmeans_max_vectors: usize,
    /// Samples per latent frame.
    #[arg(long, env = "LATSEP_COMPRESSION_FACTOR", default_value_t = 64)]
    pub compression_factor: usize,
    /// Latent feature channels F.
    #[arg(long, env = "LATSEP_FEATURE_CHANNELS", default_value_t = 8)]
    pub feature_channels: usize,
    #[arg(long, env = "LATSEP_HIDDEN_CHANNELS", default_value_t = 16)]
    pub hidden_channels: usize,
    /// Residual quantizer stages (0 disables quantization).
    #[arg(long, env = "LATSEP_RVQ_STAGES", default_value_t = 4)]
    pub rvq_stages: usize,
    #[arg(long, env = "LATSEP_CODEBOOK_SIZE", default_value_t = 64)]
    pub codebook_size: usize,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long, env = "LATSEP_DATA", default_value = "data")]
    pub data: PathBuf,
    /// Trained codec checkpoint.
    #[arg(long, env = "LATSEP_CODEC", default_value = "codec.ckpt")]
    pub codec: PathBuf,
    /// Final model checkpoint to write.
    #[arg(long, env = "LATSEP_OUT", default_value = "model.ckpt")]
    pub out: PathBuf,
    /// Steps with the mixture conditioner frozen.
    #[arg(long, env = "LATSEP_STAGE1_STEPS", default_value_t = 5000)]
    pub stage1_steps: usize,
    /// Steps with everything trainable.
    #[arg(long, env = "LATSEP_STAGE2_STEPS", default_value_t = 2000)]
    pub stage2_steps: usize,
    #[arg(long, env = "LATSEP_LR_STAGE1", default_value_t = 2e-4)]
    pub lr_stage1: f64,
    #[arg(long, env = "LATSEP_LR_STAGE2", default_value_t = 5e-5)]
    pub lr_stage2: f64,
    #[arg(long, env = "LATSEP_WEIGHT_DECAY", default_value_t = 1e-3)]
    pub weight_decay: f64,
    #[arg(long, env = "LATSEP_BATCH_SIZE", default_value_t = 8)]
    pub batch_size: usize,
    /// Micro-batches per optimizer step.
    #[arg(long, env = "LATSEP_GRAD_ACCUM", default_value_t = 1)]
    pub grad_accum: usize,
    /// Training crop in samples.
    #[arg(long, env = "LATSEP_CROP_SAMPLES", default_value_t = 8192)]
    pub crop_samples: usize,
    /// Diffusion steps T.
    #[arg(long, env = "LATSEP_STEPS", default_value_t = 50)]
    pub steps: usize,
    /// Comma-separated subset of polarity_inversion, channel_flip,
    /// pitch_shift, stem_remix ("none" for no augmentation).
    #[arg(
        long,
        env = "LATSEP_AUGMENTATIONS",
        value_delimiter = ',',
        default_value = "polarity_inversion,channel_flip,pitch_shift,stem_remix"
    )]
    pub augmentations: Vec<String>,
    /// Fixed validation examples drawn from the validation split.
    #[arg(long, env = "LATSEP_VALID_EXAMPLES", default_value_t = 32)]
    pub valid_examples: usize,
    /// Validation interval in steps (0 = at stage ends only).
    #[arg(long, env = "LATSEP_VALID_EVERY", default_value_t = 0)]
    pub valid_every: usize,
    /// Generator size.
    #[arg(long, env = "LATSEP_ARCHITECTURE", value_enum, default_value_t = Architecture::Toy)]
    pub architecture: Architecture,
    /// Overrides the architecture's base channel width [default: 16 toy, 128 paper].
    #[arg(long, env = "LATSEP_BASE_CHANNELS")]
    pub base_channels: Option<usize>,
    /// Continue from a training-state checkpoint, e.g. stage1.state [default: none].
    #[arg(long, env = "LATSEP_RESUME")]
    pub resume: Option<PathBuf>,
    /// Per-step loss log [default: <out> with .csv extension].
    #[arg(long, env = "LATSEP_LOG_CSV")]
    pub log_csv: Option<PathBuf>,
    /// Directory for stage-boundary training states [default: next to <out>].
    #[arg(long, env = "LATSEP_CHECKPOINT_DIR")]
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct SeparateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Trained model checkpoint.
    #[arg(long, env = "LATSEP_MODEL", default_value = "model.ckpt")]
    pub model: PathBuf,
    #[arg(long, env = "LATSEP_CODEC", default_value = "codec.ckpt")]
    pub codec: PathBuf,
    /// Mixture WAV to separate; alternative to --data [default: none].
    #[arg(id = "in", long = "in", env = "LATSEP_IN", conflicts_with = "data")]
    #[serde(rename = "in")]
    pub input: Option<PathBuf>,
    /// Corpus directory: separate every mixture of --split [default: none].
    #[arg(long, env = "LATSEP_DATA")]
    pub data: Option<PathBuf>,
    #[arg(long, env = "LATSEP_SPLIT", value_enum, default_value_t = SplitArg::Valid)]
    pub split: SplitArg,
    /// Output WAV (with --in) or directory of <track id>.wav files (with --data).
    #[arg(long, env = "LATSEP_OUT", default_value = "vocals.wav")]
    pub out: PathBuf,
    /// Sampling steps T.
    #[arg(long, env = "LATSEP_STEPS", default_value_t = 50)]
    pub steps: usize,
    /// Chunk overlap as a fraction of the chunk length.
    #[arg(long, env = "LATSEP_OVERLAP", default_value_t = 0.2)]
    pub overlap: f64,
    /// Chunk length in samples.
    #[arg(long, env = "LATSEP_CHUNK_SAMPLES", default_value_t = 8192)]
    pub chunk_samples: usize,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Corpus directory with the reference stems.
    #[arg(long, env = "LATSEP_DATA", default_value = "data")]
    pub data: PathBuf,
    #[arg(long, env = "LATSEP_SPLIT", value_enum, default_value_t = SplitArg::Valid)]
    pub split: SplitArg,
    /// Directory of separated vocals named <track id>.wav.
    #[arg(long, env = "LATSEP_ESTIMATES", default_value = "separated")]
    pub estimates: PathBuf,
    /// Also score the unprocessed mixtures and count per-track wins [default: false].
    #[arg(long, env = "LATSEP_BASELINE")]
    pub baseline: bool,
    /// Per-track metrics CSV (a JSON copy is written next to it).
    #[arg(long, env = "LATSEP_OUT", default_value = "metrics.csv")]
    pub out: PathBuf,
    #[arg(long, env = "LATSEP_FFT_SIZE", default_value_t = 1024)]
    pub fft_size: usize,
    #[arg(long, env = "LATSEP_HOP", default_value_t = 256)]
    pub hop: usize,
    #[arg(long, env = "LATSEP_MEL_BANDS", default_value_t = 64)]
    pub mel_bands: usize,
    /// YIN voicing threshold.
    #[arg(long, env = "LATSEP_PITCH_THRESHOLD", default_value_t = 0.15)]
    pub pitch_threshold: f64,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct RobustnessArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long, env = "LATSEP_CODEC", default_value = "codec.ckpt")]
    pub codec: PathBuf,
    /// Corpus whose mixtures are used as test clips.
    #[arg(long, env = "LATSEP_DATA", default_value = "data")]
    pub data: PathBuf,
    #[arg(long, env = "LATSEP_SPLIT", value_enum, default_value_t = SplitArg::Valid)]
    pub split: SplitArg,
    /// Noise deviations relative to the contaminated representation's std.
    #[arg(long, env = "LATSEP_STDS", value_delimiter = ',', default_value = "0,1e-6,1e-3,0.01,0.1,1")]
    pub stds: Vec<f64>,
    /// Comma-separated subset of identity, nq, bq, aq.
    #[arg(long, env = "LATSEP_EXPERIMENTS", value_delimiter = ',', default_value = "identity,nq,bq,aq")]
    pub experiments: Vec<String>,
    /// How noise is applied to quantized codes: index_truncate, index_round or embedding.
    #[arg(long, env = "LATSEP_AQ_MODE", default_value = "index_truncate")]
    pub aq_mode: String,
    /// Table CSV (a JSON report with per-track detail is written next to it).
    #[arg(long, env = "LATSEP_OUT", default_value = "robustness.csv")]
    pub out: PathBuf,
}
