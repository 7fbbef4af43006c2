//! Multichannel waveforms and 32-bit float RIFF/WAVE I/O.

use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// `A × S` audio; every channel has the same length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub sample_rate: u32,
    channels: Vec<Vec<f64>>,
}

impl Waveform {
    pub fn new(sample_rate: u32, channels: Vec<Vec<f64>>) -> Result<Self> {
        ensure!(!channels.is_empty(), "waveform needs at least one channel");
        let len = channels[0].len();
        ensure!(
            channels.iter().all(|c| c.len() == len),
            "waveform channels have different lengths"
        );
        Ok(Self { sample_rate, channels })
    }

    pub fn mono(sample_rate: u32, samples: Vec<f64>) -> Self {
        Self {
            sample_rate,
            channels: vec![samples],
        }
    }

    pub fn silence(sample_rate: u32, num_channels: usize, len: usize) -> Self {
        Self {
            sample_rate,
            channels: vec![vec![0.0; len]; num_channels.max(1)],
        }
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn channels_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.channels
    }

    /// Average of all channels.
    pub fn downmix(&self) -> Vec<f64> {
        let n = self.num_channels() as f64;
        (0..self.len())
            .map(|i| self.channels.iter().map(|c| c[i]).sum::<f64>() / n)
            .collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            sample_rate: self.sample_rate,
            channels: self.channels.iter().map(|c| c.iter().map(|&v| f(v)).collect()).collect(),
        }
    }

    pub fn zip_map(&self, other: &Waveform, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        ensure!(
            self.num_channels() == other.num_channels() && self.len() == other.len(),
            "waveform shape mismatch: {}x{} vs {}x{}",
            self.num_channels(),
            self.len(),
            other.num_channels(),
            other.len()
        );
        Ok(Self {
            sample_rate: self.sample_rate,
            channels: self
                .channels
                .iter()
                .zip(&other.channels)
                .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
                .collect(),
        })
    }

    pub fn add(&self, other: &Waveform) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Waveform) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    /// Samples `[start, end)`, zero-filled past the end.
    pub fn segment(&self, start: usize, end: usize) -> Self {
        Self {
            sample_rate: self.sample_rate,
            channels: self
                .channels
                .iter()
                .map(|c| (start..end).map(|i| c.get(i).copied().unwrap_or(0.0)).collect())
                .collect(),
        }
    }

    pub fn resized(&self, len: usize) -> Self {
        self.segment(0, len)
    }

    pub fn rms(&self) -> f64 {
        let n = (self.len() * self.num_channels()) as f64;
        if n == 0.0 {
            return 0.0;
        }
        (self.channels.iter().flatten().map(|v| v * v).sum::<f64>() / n).sqrt()
    }

    pub fn std(&self) -> f64 {
        let all: Vec<f64> = self.channels.iter().flatten().copied().collect();
        let n = all.len() as f64;
        if n == 0.0 {
            return 0.0;
        }
        let m = all.iter().sum::<f64>() / n;
        (all.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.channels.iter().flatten().all(|v| v.is_finite())
    }

    /// Channels as rows of a matrix.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.channels).expect("channels share a length")
    }

    pub fn from_tensor(sample_rate: u32, t: &Tensor) -> Self {
        Self {
            sample_rate,
            channels: (0..t.rows()).map(|r| t.row(r).to_vec()).collect(),
        }
    }
}

const WAVE_FORMAT_IEEE_FLOAT: u16 = 3;

/// Encodes a waveform as RIFF/WAVE with 32-bit little-endian float samples.
/// Samples outside `[-1, 1]` are clipped.
pub fn wav_bytes(wave: &Waveform) -> Vec<u8> {
    let a = wave.num_channels() as u16;
    let data_len = (wave.len() * a as usize * 4) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&WAVE_FORMAT_IEEE_FLOAT.to_le_bytes());
    out.extend_from_slice(&a.to_le_bytes());
    out.extend_from_slice(&wave.sample_rate.to_le_bytes());
    out.extend_from_slice(&(wave.sample_rate * a as u32 * 4).to_le_bytes());
    out.extend_from_slice(&(a * 4).to_le_bytes());
    out.extend_from_slice(&32u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    let mut clipped = 0usize;
    for i in 0..wave.len() {
        for c in wave.channels() {
            let mut v = c[i];
            if !(-1.0..=1.0).contains(&v) || !v.is_finite() {
                clipped += 1;
                v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
            }
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if clipped > 0 {
        warn!("clipped {clipped} samples outside [-1, 1] while writing wav");
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, wav_bytes(wave)).map_err(|e| Error::io(path, e))
}

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        what: "wav".into(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn u16_at(b: &[u8], off: usize) -> Result<u16> {
    b.get(off..off + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| parse_err(off, "unexpected end of file"))
}

fn u32_at(b: &[u8], off: usize) -> Result<u32> {
    b.get(off..off + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| parse_err(off, "unexpected end of file"))
}

/// Parses a 32-bit float RIFF/WAVE file.
pub fn parse_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 {
        return Err(parse_err(bytes.len(), "missing RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(parse_err(0, "missing RIFF chunk id"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(parse_err(8, "missing WAVE form type"));
    }
    let mut off = 12;
    let mut fmt: Option<(u16, u32, u16)> = None;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = u32_at(bytes, off + 4)? as usize;
        let body = off + 8;
        if id == b"fmt " {
            if body + 16 > bytes.len() {
                return Err(parse_err(bytes.len(), "fmt chunk truncated"));
            }
            let format = u16_at(bytes, body)?;
            let channels = u16_at(bytes, body + 2)?;
            let rate = u32_at(bytes, body + 4)?;
            let bits = u16_at(bytes, body + 14)?;
            if format != WAVE_FORMAT_IEEE_FLOAT || bits != 32 {
                return Err(parse_err(body, format!("unsupported sample format {format} with {bits} bits")));
            }
            if channels == 0 {
                return Err(parse_err(body + 2, "zero channels"));
            }
            fmt = Some((channels, rate, bits));
        } else if id == b"data" {
            let (channels, rate, _) = fmt.ok_or_else(|| parse_err(off, "missing fmt chunk before data chunk"))?;
            let end = body + size;
            if end > bytes.len() {
                return Err(parse_err(bytes.len(), "data chunk truncated"));
            }
            let a = channels as usize;
            let frames = size / (4 * a);
            let mut chans = vec![Vec::with_capacity(frames); a];
            for i in 0..frames {
                for (c, ch) in chans.iter_mut().enumerate() {
                    let p = body + (i * a + c) * 4;
                    let v = f32::from_le_bytes([bytes[p], bytes[p + 1], bytes[p + 2], bytes[p + 3]]);
                    ch.push(v as f64);
                }
            }
            return Waveform::new(rate, chans);
        }
        off = body + size + (size & 1);
    }
    if fmt.is_none() {
        Err(parse_err(off.min(bytes.len()), "missing fmt chunk"))
    } else {
        Err(parse_err(off.min(bytes.len()), "missing data chunk"))
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_length_wave_is_valid() {
        let w = Waveform::mono(8000, vec![]);
        let bytes = wav_bytes(&w);
        assert_eq!(bytes.len(), 44);
        assert_eq!(u32_at(&bytes, 40).unwrap(), 0);
        assert_eq!(parse_wav(&bytes).unwrap(), w);
    }

    #[test]
    fn truncated_header_names_missing_chunk() {
        let w = Waveform::mono(8000, vec![0.25, -0.5]);
        let bytes = wav_bytes(&w);
        let err = parse_wav(&bytes[..20]).unwrap_err().to_string();
        assert!(err.contains("fmt"), "{err}");
        let err = parse_wav(&bytes[..36]).unwrap_err().to_string();
        assert!(err.contains("data"), "{err}");
        let err = parse_wav(&bytes[..4]).unwrap_err().to_string();
        assert!(err.contains("RIFF"), "{err}");
        let err = parse_wav(&bytes[..47]).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn clipping_on_write() {
        let w = Waveform::mono(8000, vec![2.0, -3.0, 0.5]);
        let back = parse_wav(&wav_bytes(&w)).unwrap();
        assert_eq!(back.channel(0), &[1.0, -1.0, 0.5]);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(samples in proptest::collection::vec(-1.0f32..=1.0, 0..200), stereo in any::<bool>()) {
            let s: Vec<f64> = samples.iter().map(|&v| v as f64).collect();
            let w = if stereo {
                Waveform::new(16000, vec![s.clone(), s.iter().map(|v| -v).collect()]).unwrap()
            } else {
                Waveform::mono(8000, s)
            };
            prop_assert_eq!(parse_wav(&wav_bytes(&w)).unwrap(), w);
        }
    }
}
