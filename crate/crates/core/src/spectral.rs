//! Short-time Fourier analysis and mel filterbanks shared by the codec loss
//! and the evaluation metrics.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{ensure, Result};

/// A planned real-input STFT with a periodic Hann window.
pub struct StftPlan {
    fft_size: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan")
            .field("fft_size", &self.fft_size)
            .field("hop", &self.hop)
            .finish()
    }
}

pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

impl StftPlan {
    pub fn new(fft_size: usize, hop: usize) -> Result<Self> {
        ensure!(fft_size >= 2, "fft size must be at least 2");
        ensure!(hop >= 1 && hop <= fft_size, "hop must be in [1, fft_size]");
        let mut planner = FftPlanner::new();
        Ok(Self {
            fft_size,
            hop,
            window: hann(fft_size),
            forward: planner.plan_fft_forward(fft_size),
            inverse: planner.plan_fft_inverse(fft_size),
        })
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Frames start at multiples of `hop`; the tail is zero-padded so every
    /// sample lands in at least one frame.
    pub fn num_frames(&self, len: usize) -> usize {
        if len <= self.fft_size {
            1
        } else {
            1 + (len - self.fft_size).div_ceil(self.hop)
        }
    }

    /// Complex spectra, `frames × bins`, flattened row-major.
    pub fn spectrum(&self, signal: &[f64]) -> Vec<Complex<f64>> {
        let frames = self.num_frames(signal.len());
        let bins = self.bins();
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        for f in 0..frames {
            let start = f * self.hop;
            for (n, b) in buf.iter_mut().enumerate() {
                let x = signal.get(start + n).copied().unwrap_or(0.0);
                *b = Complex::new(x * self.window[n], 0.0);
            }
            self.forward.process(&mut buf);
            out.extend_from_slice(&buf[..bins]);
        }
        out
    }

    /// Magnitudes, `frames × bins`, flattened row-major.
    pub fn magnitude(&self, signal: &[f64]) -> Vec<f64> {
        self.spectrum(signal).iter().map(|c| c.norm()).collect()
    }

    /// Adjoint of the magnitude map: given `coef[k]` per frame and bin,
    /// accumulates `Σ_k coef_k · ∂|X_k|/∂x` into `grad`.
    pub(crate) fn magnitude_vjp(&self, spectrum: &[Complex<f64>], coef: &[f64], grad: &mut [f64]) {
        let bins = self.bins();
        let frames = spectrum.len() / bins;
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        for f in 0..frames {
            buf.fill(Complex::new(0.0, 0.0));
            for k in 0..bins {
                let x = spectrum[f * bins + k];
                let mag = x.norm();
                if mag > 1e-20 {
                    buf[k] = x * (coef[f * bins + k] / mag);
                }
            }
            // Unnormalized inverse transform gives Σ_k Z_k e^{+iθ}.
            self.inverse.process(&mut buf);
            let start = f * self.hop;
            for (n, (w, b)) in self.window.iter().zip(&buf).enumerate() {
                if let Some(g) = grad.get_mut(start + n) {
                    *g += w * b.re;
                }
            }
        }
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank (HTK mel scale), `bands × bins`.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    bands: usize,
    bins: usize,
    weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(sample_rate: f64, fft_size: usize, bands: usize, fmin: f64, fmax: f64) -> Result<Self> {
        ensure!(bands >= 1, "need at least one mel band");
        ensure!(
            fmin >= 0.0 && fmin < fmax && fmax <= sample_rate / 2.0 + 1e-9,
            "mel range must satisfy 0 <= fmin < fmax <= nyquist"
        );
        let bins = fft_size / 2 + 1;
        let mel_lo = hz_to_mel(fmin);
        let mel_hi = hz_to_mel(fmax);
        let edges: Vec<f64> = (0..bands + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (bands + 1) as f64))
            .collect();
        let bin_hz = sample_rate / fft_size as f64;
        let mut weights = vec![0.0; bands * bins];
        for b in 0..bands {
            let (lo, center, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f <= center {
                    (f - lo) / (center - lo)
                } else if f > center && f < hi {
                    (hi - f) / (hi - center)
                } else {
                    0.0
                };
                weights[b * bins + k] = w;
            }
        }
        Ok(Self {
            bands,
            bins,
            weights,
        })
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    /// Applies the filterbank to one magnitude frame.
    pub fn apply(&self, mag: &[f64]) -> Vec<f64> {
        debug_assert_eq!(mag.len(), self.bins);
        (0..self.bands)
            .map(|b| {
                self.weights[b * self.bins..(b + 1) * self.bins]
                    .iter()
                    .zip(mag)
                    .map(|(w, m)| w * m)
                    .sum()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_covers_signal() {
        let plan = StftPlan::new(8, 4).unwrap();
        assert_eq!(plan.num_frames(3), 1);
        assert_eq!(plan.num_frames(8), 1);
        assert_eq!(plan.num_frames(9), 2);
        assert_eq!(plan.num_frames(12), 2);
        assert_eq!(plan.num_frames(13), 3);
    }

    #[test]
    fn spectrum_matches_direct_dft() {
        let plan = StftPlan::new(16, 8).unwrap();
        let x: Vec<f64> = (0..16).map(|i| ((i * 5 % 7) as f64 - 3.0) * 0.1).collect();
        let spec = plan.spectrum(&x);
        let w = hann(16);
        assert_eq!(spec.len(), plan.bins());
        for (k, got) in spec.iter().enumerate() {
            let mut acc = Complex::new(0.0, 0.0);
            for (n, &v) in x.iter().enumerate() {
                let th = -2.0 * std::f64::consts::PI * (k * n) as f64 / 16.0;
                acc += Complex::new(th.cos(), th.sin()) * (v * w[n]);
            }
            assert!((acc - got).norm() < 1e-12);
        }
    }

    #[test]
    fn magnitude_vjp_matches_finite_differences() {
        let plan = StftPlan::new(16, 5).unwrap();
        // Irregular signal: periodic test data can put a bin exactly at |X| = 0,
        // where the magnitude has a kink.
        let x: Vec<f64> = (0..30).map(|i| (i as f64 * 1.37).sin() * 0.4 + (i as f64 * 0.21).cos() * 0.1).collect();
        let coef: Vec<f64> = (0..plan.num_frames(30) * plan.bins())
            .map(|i| ((i * 3 % 5) as f64 - 2.0) * 0.3)
            .collect();
        let objective = |s: &[f64]| -> f64 {
            plan.magnitude(s).iter().zip(&coef).map(|(m, c)| m * c).sum()
        };
        let mut grad = vec![0.0; x.len()];
        plan.magnitude_vjp(&plan.spectrum(&x), &coef, &mut grad);
        for i in 0..x.len() {
            let h = 1e-6;
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6, "sample {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn mel_filters_are_nonnegative_and_cover_range() {
        let fb = MelFilterbank::new(8000.0, 1024, 64, 0.0, 4000.0).unwrap();
        let flat = vec![1.0; 513];
        let out = fb.apply(&flat);
        assert_eq!(out.len(), 64);
        assert!(out.iter().all(|&v| v > 0.0));
        assert!(MelFilterbank::new(8000.0, 1024, 64, 0.0, 5000.0).is_err());
    }
}
