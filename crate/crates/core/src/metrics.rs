//! Objective separation metrics: SDR, log-spectral distance, Mel-spectrogram
//! MAE and log-F0 RMSE, plus per-track reports in CSV and JSON.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{ensure, Error, Result};
use crate::pitch::{track_pitch, PitchConfig, PitchTrack};
use crate::spectral::{MelFilterbank, StftPlan};

/// SDR ceiling, reached when the residual is below 1e-12 of the reference energy.
pub const SDR_CAP_DB: f64 = 120.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowKind {
    #[default]
    Hann,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window: WindowKind,
    pub mel_bands: usize,
    pub fmin: f64,
    /// `None` means Nyquist.
    pub fmax: Option<f64>,
    /// Floor applied to linear magnitudes before taking log10.
    pub log_floor: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            fft_size: 1024,
            hop: 256,
            window: WindowKind::Hann,
            mel_bands: 64,
            fmin: 0.0,
            fmax: None,
            log_floor: 1e-5,
        }
    }
}

impl SpectrogramConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        ensure!(self.hop >= 1 && self.hop <= self.fft_size, "hop must be in [1, fft_size]");
        ensure!(self.log_floor > 0.0, "log_floor must be positive");
        if let Some(f) = self.fmax {
            ensure!(f <= sample_rate as f64 / 2.0, "fmax {f} Hz exceeds Nyquist");
        }
        Ok(())
    }

    fn plan(&self) -> Result<StftPlan> {
        StftPlan::new(self.fft_size, self.hop)
    }

    fn filterbank(&self, sample_rate: u32) -> Result<MelFilterbank> {
        let nyquist = sample_rate as f64 / 2.0;
        MelFilterbank::new(
            sample_rate as f64,
            self.fft_size,
            self.mel_bands,
            self.fmin,
            self.fmax.unwrap_or(nyquist),
        )
    }

    fn log(&self, v: f64) -> f64 {
        v.max(self.log_floor).log10()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub spectrogram: SpectrogramConfig,
    pub pitch: PitchConfig,
}

fn check_pair(reference: &Waveform, estimate: &Waveform) -> Result<()> {
    ensure!(
        reference.len() == estimate.len(),
        "reference has {} samples, estimate has {}",
        reference.len(),
        estimate.len()
    );
    ensure!(
        reference.num_channels() == estimate.num_channels(),
        "reference has {} channels, estimate has {}",
        reference.num_channels(),
        estimate.num_channels()
    );
    ensure!(reference.sample_rate == estimate.sample_rate, "sample rates differ");
    Ok(())
}

/// Signal-to-distortion ratio in dB, over all channels.
pub fn sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    check_pair(reference, estimate)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (r, e) in reference.channels().iter().zip(estimate.channels()) {
        for (&x, &y) in r.iter().zip(e) {
            num += x * x;
            den += (x - y) * (x - y);
        }
    }
    if num == 0.0 {
        return Err(Error::UndefinedMetric("SDR of an all-zero reference".into()));
    }
    if den < 1e-12 * num {
        return Ok(SDR_CAP_DB);
    }
    Ok((10.0 * (num / den).log10()).min(SDR_CAP_DB))
}

/// Per-frame spectral distances for one channel pair.
fn frame_distances(
    reference: &[f64],
    estimate: &[f64],
    plan: &StftPlan,
    cfg: &SpectrogramConfig,
    mel: Option<&MelFilterbank>,
) -> Vec<f64> {
    let bins = plan.bins();
    let mr = plan.magnitude(reference);
    let me = plan.magnitude(estimate);
    let frames = mr.len() / bins;
    (0..frames)
        .map(|f| {
            let a = &mr[f * bins..(f + 1) * bins];
            let b = &me[f * bins..(f + 1) * bins];
            match mel {
                None => {
                    let ms: f64 = a.iter().zip(b).map(|(&x, &y)| (cfg.log(x) - cfg.log(y)).powi(2)).sum::<f64>() / bins as f64;
                    ms.sqrt()
                }
                Some(fb) => {
                    let (ma, mb) = (fb.apply(a), fb.apply(b));
                    ma.iter().zip(&mb).map(|(&x, &y)| (cfg.log(x) - cfg.log(y)).abs()).sum::<f64>() / fb.bands() as f64
                }
            }
        })
        .collect()
}

/// Mean of per-frame distances over the frames selected by `mask` (all when
/// `None`), averaged over channels.
fn masked_spectral(
    reference: &Waveform,
    estimate: &Waveform,
    cfg: &SpectrogramConfig,
    mel: bool,
    mask: Option<&[bool]>,
) -> Result<Option<f64>> {
    check_pair(reference, estimate)?;
    cfg.validate(reference.sample_rate)?;
    let plan = cfg.plan()?;
    let fb = if mel { Some(cfg.filterbank(reference.sample_rate)?) } else { None };
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, e) in reference.channels().iter().zip(estimate.channels()) {
        let d = frame_distances(r, e, &plan, cfg, fb.as_ref());
        for (f, v) in d.iter().enumerate() {
            if mask.is_none_or(|m| m.get(f).copied().unwrap_or(false)) {
                total += v;
                count += 1;
            }
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Log-spectral distance: per-frame RMS over bins of the log10 magnitude
/// difference, averaged over frames.
pub fn lsd(reference: &Waveform, estimate: &Waveform, cfg: &SpectrogramConfig) -> Result<f64> {
    Ok(masked_spectral(reference, estimate, cfg, false, None)?.unwrap_or(0.0))
}

/// Mean absolute difference of log10 mel magnitudes over frames × bands.
pub fn mel_mae(reference: &Waveform, estimate: &Waveform, cfg: &SpectrogramConfig) -> Result<f64> {
    Ok(masked_spectral(reference, estimate, cfg, true, None)?.unwrap_or(0.0))
}

/// RMSE of natural-log f0 over frames voiced in both tracks.
pub fn logf0_rmse(reference: &PitchTrack, estimate: &PitchTrack) -> Result<f64> {
    ensure!(
        reference.f0_hz.len() == estimate.f0_hz.len(),
        "pitch tracks have {} and {} frames",
        reference.f0_hz.len(),
        estimate.f0_hz.len()
    );
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..reference.f0_hz.len() {
        if reference.voiced[i] && estimate.voiced[i] {
            sum += (reference.f0_hz[i].ln() - estimate.f0_hz[i].ln()).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("no frames are voiced in both pitch tracks".into()));
    }
    Ok((sum / n as f64).sqrt())
}

/// One row of a metric report. `None` marks a metric that is undefined for
/// this track (silent reference, no voiced frames, no jointly voiced frames).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackMetrics {
    pub track: String,
    pub sdr_db: Option<f64>,
    pub lsd: Option<f64>,
    pub mel_mae: Option<f64>,
    pub logf0_rmse: Option<f64>,
    /// Reference frames used for the spectral metrics.
    pub voiced_frames: usize,
}

fn undefined_to_none(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// All four metrics for one track. Spectral metrics are restricted to the
/// frames where the reference is voiced; frames outside are dropped.
pub fn evaluate_track(name: &str, reference: &Waveform, estimate: &Waveform, cfg: &MetricConfig) -> Result<TrackMetrics> {
    check_pair(reference, estimate)?;
    let sdr_db = undefined_to_none(sdr(reference, estimate))?;
    ensure!(
        cfg.pitch.hop == cfg.spectrogram.hop && cfg.pitch.frame_len == cfg.spectrogram.fft_size,
        "pitch and spectrogram frame grids must match"
    );
    let ref_track = track_pitch(reference, &cfg.pitch)?;
    let est_track = track_pitch(estimate, &cfg.pitch)?;
    let logf0 = undefined_to_none(logf0_rmse(&ref_track, &est_track))?;
    let mask = &ref_track.voiced;
    let lsd = masked_spectral(reference, estimate, &cfg.spectrogram, false, Some(mask))?;
    let mel = masked_spectral(reference, estimate, &cfg.spectrogram, true, Some(mask))?;
    Ok(TrackMetrics {
        track: name.to_string(),
        sdr_db,
        lsd,
        mel_mae: mel,
        logf0_rmse: logf0,
        voiced_frames: mask.iter().filter(|&&v| v).count(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tracks: Vec<TrackMetrics>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (s, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl MetricReport {
    /// Means over the tracks where each metric is defined.
    pub fn aggregate(&self) -> TrackMetrics {
        TrackMetrics {
            track: "mean".into(),
            sdr_db: mean_defined(self.tracks.iter().map(|t| t.sdr_db)),
            lsd: mean_defined(self.tracks.iter().map(|t| t.lsd)),
            mel_mae: mean_defined(self.tracks.iter().map(|t| t.mel_mae)),
            logf0_rmse: mean_defined(self.tracks.iter().map(|t| t.logf0_rmse)),
            voiced_frames: self.tracks.iter().map(|t| t.voiced_frames).sum(),
        }
    }

    /// CSV with columns `track,sdr_db,lsd,mel_mae,logf0_rmse,voiced_frames`,
    /// one row per track and a final `mean` row; undefined values are empty.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for t in self.tracks.iter().chain(std::iter::once(&self.aggregate())) {
            w.serialize(t)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidState(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut tracks = r.deserialize().collect::<std::result::Result<Vec<TrackMetrics>, _>>()?;
        if tracks.last().is_some_and(|t| t.track == "mean") {
            tracks.pop();
        }
        Ok(Self { tracks })
    }

    /// JSON object `{ "tracks": [...], "mean": {...} }`.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Out<'a> {
            tracks: &'a [TrackMetrics],
            mean: TrackMetrics,
        }
        Ok(serde_json::to_string_pretty(&Out {
            tracks: &self.tracks,
            mean: self.aggregate(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct In {
            tracks: Vec<TrackMetrics>,
        }
        let v: In = serde_json::from_str(text)?;
        Ok(Self { tracks: v.tracks })
    }

    pub fn write(&self, csv_path: impl AsRef<Path>, json_path: impl AsRef<Path>) -> Result<()> {
        for (path, body) in [(csv_path.as_ref(), self.to_csv()?), (json_path.as_ref(), self.to_json()?)] {
            let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}
