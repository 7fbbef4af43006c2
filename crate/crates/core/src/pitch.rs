//! YIN-style monophonic pitch tracking.

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitchConfig {
    /// Analysis frame in samples; the difference function integrates over the
    /// first half and searches lags up to the second.
    pub frame_len: usize,
    pub hop: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Voiced when the cumulative-mean-normalized difference dips below this.
    pub threshold: f64,
    /// Frames with RMS below this are unvoiced regardless of periodicity.
    pub silence_rms: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            frame_len: 1024,
            hop: 256,
            fmin: 60.0,
            fmax: 1000.0,
            threshold: 0.15,
            silence_rms: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitchTrack {
    /// 0 for unvoiced frames.
    pub f0_hz: Vec<f64>,
    pub voiced: Vec<bool>,
    pub hop_secs: f64,
}

impl PitchTrack {
    pub fn voiced_fraction(&self) -> f64 {
        if self.voiced.is_empty() {
            return 0.0;
        }
        self.voiced.iter().filter(|&&v| v).count() as f64 / self.voiced.len() as f64
    }

    pub fn median_voiced_f0(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.f0_hz.iter().copied().filter(|&f| f > 0.0).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(v[v.len() / 2])
    }
}

/// Frames start at multiples of `hop`, the last one zero-padded; this is the
/// same grid as the metrics spectrogram when sizes match.
pub fn num_frames(len: usize, frame_len: usize, hop: usize) -> usize {
    if len <= frame_len {
        1
    } else {
        1 + (len - frame_len).div_ceil(hop)
    }
}

/// Tracks f0 on the channel average of `audio`.
pub fn track_pitch(audio: &Waveform, cfg: &PitchConfig) -> Result<PitchTrack> {
    ensure!(cfg.hop >= 1 && cfg.frame_len >= 4, "invalid pitch frame geometry");
    ensure!(cfg.fmin > 0.0 && cfg.fmin < cfg.fmax, "pitch range must satisfy 0 < fmin < fmax");
    ensure!(
        audio.len() >= cfg.frame_len,
        "audio has {} samples, pitch tracking needs at least one {}-sample frame",
        audio.len(),
        cfg.frame_len
    );
    let sr = audio.sample_rate as f64;
    let w = cfg.frame_len / 2;
    let tau_min = ((sr / cfg.fmax).floor() as usize).max(2);
    let tau_max = ((sr / cfg.fmin).ceil() as usize).min(w - 1);
    ensure!(tau_min + 1 < tau_max, "pitch range does not fit the analysis frame");
    let x = audio.downmix();
    let frames = num_frames(x.len(), cfg.frame_len, cfg.hop);
    let mut f0_hz = Vec::with_capacity(frames);
    let mut voiced = Vec::with_capacity(frames);
    let mut buf = vec![0.0; cfg.frame_len];
    let mut d = vec![0.0; tau_max + 2];
    for f in 0..frames {
        let start = f * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = x.get(start + i).copied().unwrap_or(0.0);
        }
        let rms = (buf.iter().map(|v| v * v).sum::<f64>() / buf.len() as f64).sqrt();
        let est = if rms < cfg.silence_rms {
            None
        } else {
            yin_frame(&buf, w, tau_min, tau_max, cfg.threshold, &mut d).map(|tau| sr / tau)
        };
        match est.map(|f| f.clamp(cfg.fmin, cfg.fmax)) {
            Some(f) => {
                f0_hz.push(f);
                voiced.push(true);
            }
            None => {
                f0_hz.push(0.0);
                voiced.push(false);
            }
        }
    }
    Ok(PitchTrack {
        f0_hz,
        voiced,
        hop_secs: cfg.hop as f64 / sr,
    })
}

/// Returns the refined period in samples, or `None` when no lag in range has
/// a normalized difference below `threshold`.
fn yin_frame(buf: &[f64], w: usize, tau_min: usize, tau_max: usize, threshold: f64, d: &mut [f64]) -> Option<f64> {
    // Difference function, then cumulative-mean normalization (d'(0) = 1).
    d[0] = 0.0;
    for tau in 1..=tau_max + 1 {
        d[tau] = (0..w).map(|j| (buf[j] - buf[j + tau]).powi(2)).sum();
    }
    let mut running = 0.0;
    let mut cmnd = vec![1.0; tau_max + 2];
    for tau in 1..=tau_max + 1 {
        running += d[tau];
        cmnd[tau] = if running > 0.0 { d[tau] * tau as f64 / running } else { 1.0 };
    }
    let mut tau = tau_min;
    while tau <= tau_max {
        if cmnd[tau] < threshold {
            while tau < tau_max && cmnd[tau + 1] < cmnd[tau] {
                tau += 1;
            }
            // Parabolic refinement around the local minimum.
            let (a, b, c) = (cmnd[tau - 1], cmnd[tau], cmnd[tau + 1]);
            let denom = a - 2.0 * b + c;
            let shift = if denom.abs() > 1e-12 { 0.5 * (a - c) / denom } else { 0.0 };
            return Some(tau as f64 + shift.clamp(-0.5, 0.5));
        }
        tau += 1;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn sine(f: f64, secs: f64, amp: f64) -> Waveform {
        let n = (8000.0 * secs) as usize;
        Waveform::mono(8000, (0..n).map(|i| amp * (2.0 * std::f64::consts::PI * f * i as f64 / 8000.0).sin()).collect())
    }

    #[test]
    fn pure_sine() {
        let t = track_pitch(&sine(440.0, 1.0, 0.5), &PitchConfig::default()).unwrap();
        let med = t.median_voiced_f0().unwrap();
        assert!((med - 440.0).abs() < 4.4, "median {med}");
        assert!(t.voiced_fraction() >= 0.95, "{}", t.voiced_fraction());
        for (f, v) in t.f0_hz.iter().zip(&t.voiced) {
            assert_eq!(*f > 0.0, *v);
        }
    }

    #[test]
    fn noise_and_silence_are_mostly_unvoiced() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = Waveform::mono(8000, (0..8000).map(|_| StandardNormal.sample(&mut rng)).collect());
        let t = track_pitch(&n, &PitchConfig::default()).unwrap();
        assert!(t.voiced_fraction() <= 0.2, "{}", t.voiced_fraction());
        let s = track_pitch(&Waveform::silence(8000, 1, 8000), &PitchConfig::default()).unwrap();
        assert_eq!(s.voiced_fraction(), 0.0);
        assert!(track_pitch(&Waveform::silence(8000, 1, 100), &PitchConfig::default()).is_err());
    }

    #[test]
    fn stereo_is_downmixed() {
        let s = sine(220.0, 0.5, 0.4);
        let st = Waveform::new(8000, vec![s.channel(0).to_vec(), s.channel(0).to_vec()]).unwrap();
        let cfg = PitchConfig::default();
        assert_eq!(track_pitch(&st, &cfg).unwrap(), track_pitch(&s, &cfg).unwrap());
    }

    proptest::proptest! {
        #[test]
        fn amplitude_invariant(gain in 0.01f64..10.0, f in 100.0f64..700.0) {
            let cfg = PitchConfig::default();
            let a = track_pitch(&sine(f, 0.3, 0.5), &cfg).unwrap();
            let b = track_pitch(&sine(f, 0.3, 0.5 * gain), &cfg).unwrap();
            proptest::prop_assert_eq!(&a.voiced, &b.voiced);
            for (x, y) in a.f0_hz.iter().zip(&b.f0_hz) {
                proptest::prop_assert!((x - y).abs() < 1e-6 * x.max(1.0));
            }
        }

        #[test]
        fn lower_threshold_never_adds_voiced_frames(seed in 0u64..500, th in 0.02f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Waveform::mono(8000, (0..3000).map(|i| {
                let n: f64 = StandardNormal.sample(&mut rng);
                (i as f64 * 0.2).sin() + 0.8 * n
            }).collect());
            let hi = PitchConfig { threshold: th, ..PitchConfig::default() };
            let lo = PitchConfig { threshold: th * 0.7, ..PitchConfig::default() };
            let count = |c: &PitchConfig| track_pitch(&x, c).unwrap().voiced.iter().filter(|&&v| v).count();
            proptest::prop_assert!(count(&lo) <= count(&hi));
        }
    }
}
