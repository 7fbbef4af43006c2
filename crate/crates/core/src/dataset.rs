//! Synthetic paired stems: a sung-melody proxy over a chord pad with noise
//! percussion, plus corpus generation and the on-disk manifest.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav, Waveform};
use crate::error::{ensure, Error, Result};
use crate::par;

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Note {
    pub f0_hz: f64,
    pub start_s: f64,
    pub length_s: f64,
    pub vibrato_cents: f64,
    pub vibrato_hz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chord {
    pub root_hz: f64,
    pub minor: bool,
    pub start_s: f64,
    pub length_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTrackSpec {
    pub duration_s: f64,
    pub sample_rate: u32,
    pub channels: usize,
    pub melody: Vec<Note>,
    pub chords: Vec<Chord>,
    pub drum_hits_s: Vec<f64>,
    /// Vocal RMS over accompaniment RMS, in dB.
    pub balance_db: f64,
    pub seed: u64,
}

/// Paired stems with `mixture = vocals + accompaniment` sample-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct StemSet {
    pub vocals: Waveform,
    pub accompaniment: Waveform,
    pub mixture: Waveform,
}

impl StemSet {
    pub fn from_stems(vocals: Waveform, accompaniment: Waveform) -> Result<Self> {
        let mixture = vocals.add(&accompaniment)?;
        Ok(Self {
            vocals,
            accompaniment,
            mixture,
        })
    }

    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }

    pub fn segment(&self, start: usize, end: usize) -> Self {
        Self::from_stems(self.vocals.segment(start, end), self.accompaniment.segment(start, end))
            .expect("segments share a shape")
    }
}

const VOCAL_HARMONICS: usize = 40;
/// Aspiration noise riding on each note, relative to the fundamental. Without
/// it the upper mel bands of the vocal stem are numerically empty.
const BREATH_LEVEL: f64 = 0.02;
const PAD_HARMONICS: usize = 8;

impl ToyTrackSpec {
    /// A random track: notes on a pentatonic grid between ~165 and ~392 Hz,
    /// triads rooted between 110 and 220 Hz changing every second, and a
    /// noise hit on every eighth note at 120 bpm.
    pub fn random(seed: u64, duration_s: f64, sample_rate: u32, channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = [0, 2, 4, 7, 9];
        let mut melody = Vec::new();
        let mut t = rng.random_range(0.0..0.15);
        while t < duration_s - 0.1 {
            let length = rng.random_range(0.25..0.6f64).min(duration_s - t);
            let octave = rng.random_range(0..2) * 12;
            let step = scale[rng.random_range(0..scale.len())];
            let midi = 52 + octave + step;
            let f0 = 440.0 * 2f64.powf((midi as f64 - 69.0) / 12.0);
            melody.push(Note {
                f0_hz: f0.min(392.0),
                start_s: t,
                length_s: length,
                vibrato_cents: 20.0,
                vibrato_hz: 5.0,
            });
            t += length + rng.random_range(0.0..0.15);
        }
        let mut chords = Vec::new();
        let mut t = 0.0;
        while t < duration_s {
            let semis = rng.random_range(0..12);
            chords.push(Chord {
                root_hz: 110.0 * 2f64.powf(semis as f64 / 12.0),
                minor: rng.random_bool(0.5),
                start_s: t,
                length_s: 1.0f64.min(duration_s - t),
            });
            t += 1.0;
        }
        let mut drum_hits_s = Vec::new();
        let mut t = 0.0;
        while t < duration_s {
            if rng.random_bool(0.6) {
                drum_hits_s.push(t);
            }
            t += 0.25;
        }
        Self {
            duration_s,
            sample_rate,
            channels,
            melody,
            chords,
            drum_hits_s,
            balance_db: rng.random_range(-3.0..3.0),
            seed,
        }
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }
}

fn envelope(pos: f64, length: f64, attack: f64, release: f64) -> f64 {
    if pos < 0.0 || pos >= length {
        0.0
    } else if pos < attack {
        0.5 - 0.5 * (PI * pos / attack).cos()
    } else if pos > length - release {
        0.5 - 0.5 * (PI * (length - pos) / release).cos()
    } else {
        1.0
    }
}

fn render_vocals(spec: &ToyTrackSpec) -> Vec<f64> {
    let sr = spec.sample_rate as f64;
    let nyq = sr / 2.0;
    let mut out = vec![0.0; spec.num_samples()];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xb2ea_7400);
    for note in &spec.melody {
        let start = (note.start_s * sr).round() as usize;
        let len = (note.length_s * sr).round() as usize;
        let mut phase = 0.0f64;
        for i in 0..len {
            let Some(o) = out.get_mut(start + i) else { break };
            let tt = i as f64 / sr;
            let cents = note.vibrato_cents * (2.0 * PI * note.vibrato_hz * tt).sin();
            let f = note.f0_hz * 2f64.powf(cents / 1200.0);
            phase += 2.0 * PI * f / sr;
            let env = envelope(tt, note.length_s, 0.02, 0.04);
            let mut s = 0.0;
            for h in 1..=VOCAL_HARMONICS {
                if h as f64 * f >= nyq {
                    break;
                }
                s += (h as f64 * phase).sin() / (h * h) as f64;
            }
            let breath: f64 = rng.random_range(-1.0..1.0);
            *o += env * (s + BREATH_LEVEL * breath);
        }
    }
    out
}

fn render_accompaniment(spec: &ToyTrackSpec) -> Vec<f64> {
    let sr = spec.sample_rate as f64;
    let nyq = sr / 2.0;
    let n = spec.num_samples();
    let mut out = vec![0.0; n];
    for chord in &spec.chords {
        let third = if chord.minor { 3.0 } else { 4.0 };
        let tones = [0.0, third, 7.0];
        let detune = [-4.0, 3.0, 5.0];
        let start = (chord.start_s * sr).round() as usize;
        let len = (chord.length_s * sr).round() as usize;
        for (k, (&semi, &cents)) in tones.iter().zip(&detune).enumerate() {
            let f = chord.root_hz * 2f64.powf(semi / 12.0 + cents / 1200.0);
            for i in 0..len {
                let Some(o) = out.get_mut(start + i) else { break };
                let tt = i as f64 / sr;
                let env = envelope(tt, chord.length_s, 0.03, 0.05);
                let mut s = 0.0;
                for h in 1..=PAD_HARMONICS {
                    if h as f64 * f >= nyq {
                        break;
                    }
                    s += (2.0 * PI * h as f64 * f * tt + k as f64).sin() / h as f64;
                }
                *o += 0.35 * env * s;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_d2d2);
    let decay = 0.03 * sr;
    for &hit in &spec.drum_hits_s {
        let start = (hit * sr).round() as usize;
        for i in 0..(6.0 * decay) as usize {
            let Some(o) = out.get_mut(start + i) else { break };
            let noise: f64 = rng.random_range(-1.0..1.0);
            *o += 0.8 * noise * (-(i as f64) / decay).exp();
        }
    }
    out
}

fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }
}

fn to_f32_precision(x: &mut [f64]) {
    for v in x {
        *v = *v as f32 as f64;
    }
}

/// Renders the stems of a track. Stems are rounded to `f32` precision so the
/// mixing identity survives a trip through 32-bit WAV files.
pub fn generate_track(spec: &ToyTrackSpec) -> Result<StemSet> {
    ensure!(spec.duration_s > 0.0, "track duration must be positive");
    ensure!(spec.channels == 1 || spec.channels == 2, "toy tracks are mono or stereo");
    let limit = spec.sample_rate as f64 / 8.0;
    for note in &spec.melody {
        ensure!(
            note.f0_hz > 0.0 && note.f0_hz <= limit,
            "note frequency {} Hz outside (0, {limit}]",
            note.f0_hz
        );
    }
    for chord in &spec.chords {
        ensure!(
            chord.root_hz > 0.0 && chord.root_hz <= limit,
            "chord root {} Hz outside (0, {limit}]",
            chord.root_hz
        );
    }
    let mut vocals = render_vocals(spec);
    let mut acc = render_accompaniment(spec);
    let (rv, ra) = (rms(&vocals), rms(&acc));
    if rv > 0.0 && ra > 0.0 {
        let gain = 10f64.powf(spec.balance_db / 20.0) * ra / rv;
        vocals.iter_mut().for_each(|v| *v *= gain);
    }
    let peak = vocals
        .iter()
        .zip(&acc)
        .map(|(v, a)| (v + a).abs())
        .chain(vocals.iter().map(|v| v.abs()))
        .chain(acc.iter().map(|a| a.abs()))
        .fold(0.0f64, f64::max);
    if peak > 0.0 {
        let norm = 0.9 / peak;
        vocals.iter_mut().for_each(|v| *v *= norm);
        acc.iter_mut().for_each(|v| *v *= norm);
    }
    to_f32_precision(&mut vocals);
    to_f32_precision(&mut acc);
    let sr = spec.sample_rate;
    let (v, a) = if spec.channels == 2 {
        let pan = |x: &[f64], l: f64| vec![x.iter().map(|v| v * l).collect(), x.iter().map(|v| v * (1.0 - l)).collect()];
        let mut vc: Vec<Vec<f64>> = pan(&vocals, 0.6);
        let mut ac: Vec<Vec<f64>> = pan(&acc, 0.35);
        vc.iter_mut().chain(ac.iter_mut()).for_each(|c| to_f32_precision(c));
        (Waveform::new(sr, vc)?, Waveform::new(sr, ac)?)
    } else {
        (Waveform::mono(sr, vocals), Waveform::mono(sr, acc))
    };
    StemSet::from_stems(v, a)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub vocals: PathBuf,
    pub accompaniment: PathBuf,
    pub mixture: PathBuf,
    pub seed: u64,
    pub duration: f64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub sample_rate: u32,
    pub tracks: Vec<ManifestEntry>,
}

impl Manifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.tracks.iter().filter(move |t| t.split == split)
    }
}

/// Per-track seed derived from the corpus seed.
pub fn track_seed(corpus_seed: u64, index: usize) -> u64 {
    crate::par::derive_seed(corpus_seed, index as u64)
}

/// 90/10 train/valid assignment, shuffled by seed.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5011_7a11));
    let n_valid = n.div_ceil(10);
    let mut splits = vec![Split::Train; n];
    for &i in &idx[..n_valid.min(n)] {
        splits[i] = Split::Valid;
    }
    splits
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub tracks: usize,
    pub seed: u64,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub channels: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            tracks: 200,
            seed: 7,
            duration_s: 3.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
            channels: 1,
        }
    }
}

/// Generates tracks in memory, in index order.
pub fn generate_stems(cfg: &CorpusConfig) -> Result<Vec<(ToyTrackSpec, StemSet)>> {
    ensure!(cfg.tracks >= 1, "corpus needs at least one track");
    par::map_indexed(cfg.tracks, |i| {
        let spec = ToyTrackSpec::random(track_seed(cfg.seed, i), cfg.duration_s, cfg.sample_rate, cfg.channels);
        generate_track(&spec).map(|s| (spec, s))
    })
    .into_iter()
    .collect()
}

/// Writes `tracks` stem triples as WAV files plus `manifest.json` into `dir`.
pub fn generate_corpus(cfg: &CorpusConfig, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stems = generate_stems(cfg)?;
    let splits = assign_splits(cfg.tracks, cfg.seed);
    let mut tracks = Vec::with_capacity(cfg.tracks);
    for (i, ((spec, set), split)) in stems.iter().zip(splits).enumerate() {
        let id = format!("track{i:04}");
        let entry = ManifestEntry {
            vocals: PathBuf::from(format!("{id}_vocals.wav")),
            accompaniment: PathBuf::from(format!("{id}_accompaniment.wav")),
            mixture: PathBuf::from(format!("{id}_mixture.wav")),
            id,
            seed: spec.seed,
            duration: spec.duration_s,
            split,
        };
        write_wav(dir.join(&entry.vocals), &set.vocals)?;
        write_wav(dir.join(&entry.accompaniment), &set.accompaniment)?;
        write_wav(dir.join(&entry.mixture), &set.mixture)?;
        tracks.push(entry);
    }
    let manifest = Manifest {
        sample_rate: cfg.sample_rate,
        tracks,
    };
    manifest.save(dir.join(Manifest::FILE_NAME))?;
    Ok(manifest)
}

/// Loads stems for manifest entries. The mixture is re-summed from the stems
/// so the mixing identity holds exactly.
pub fn load_tracks<'a>(dir: impl AsRef<Path>, entries: impl IntoIterator<Item = &'a ManifestEntry>) -> Result<Vec<StemSet>> {
    let dir = dir.as_ref();
    entries
        .into_iter()
        .map(|e| StemSet::from_stems(read_wav(dir.join(&e.vocals))?, read_wav(dir.join(&e.accompaniment))?))
        .collect()
}
