//! Synthetic stand-in corpus in the Speech Commands directory layout.
//!
//! Every keyword gets a fixed sequence of vowel-like segments (pitch contour
//! plus two or three formants, derived from a hash of the word). Speakers
//! shift pitch, scale formants and speak at different rates; each take adds
//! onset jitter, gain variation and background noise. The result is a
//! learnable but not trivial classification task with the same file layout,
//! format and naming as the real corpus.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::dataset::DatasetError;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub keywords: Vec<String>,
    pub speakers: usize,
    pub takes_per_speaker: usize,
    pub sample_rate: u32,
    /// Standard deviation of the additive white noise, relative to full scale.
    pub noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(keywords: &[&str], speakers: usize, takes_per_speaker: usize, seed: u64) -> Self {
        Self {
            keywords: keywords.iter().map(|k| k.to_string()).collect(),
            speakers,
            takes_per_speaker,
            sample_rate: 16_000,
            noise: 0.03,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    f0: f64,
    f0_end: f64,
    formants: [f64; 3],
    weight: f64,
}

#[derive(Debug, Clone, Copy)]
struct Speaker {
    pitch: f64,
    formant_scale: f64,
    rate: f64,
}

fn hashed_rng(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// The signature of a word does not depend on the corpus seed, so the same
/// keyword sounds alike across generated corpora.
fn word_segments(keyword: &str) -> Vec<Segment> {
    let mut rng = hashed_rng(0, &["word", keyword]);
    let n = rng.random_range(2..=3);
    (0..n)
        .map(|_| {
            let f0 = rng.random_range(100.0..180.0);
            Segment {
                f0,
                f0_end: f0 * rng.random_range(0.8..1.25),
                formants: [
                    rng.random_range(300.0..900.0),
                    rng.random_range(900.0..2400.0),
                    rng.random_range(2400.0..3400.0),
                ],
                weight: rng.random_range(0.6..1.4),
            }
        })
        .collect()
}

fn speaker_voice(seed: u64, speaker: &str) -> Speaker {
    let mut rng = hashed_rng(seed, &["speaker", speaker]);
    Speaker {
        pitch: rng.random_range(0.75..1.6),
        formant_scale: rng.random_range(0.85..1.2),
        rate: rng.random_range(0.85..1.15),
    }
}

fn speaker_id(seed: u64, index: usize) -> String {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    hex::encode(&h.finalize()[..4])
}

fn formant_gain(freq: f64, formants: &[f64; 3]) -> f64 {
    formants
        .iter()
        .zip([1.0, 0.6, 0.3])
        .map(|(&f, a)| {
            let bw = 80.0 + 0.06 * f;
            a / (1.0 + ((freq - f) / bw).powi(2))
        })
        .sum()
}

/// One second (at `sample_rate`) of a spoken keyword.
fn render(
    segments: &[Segment],
    voice: Speaker,
    rng: &mut ChaCha8Rng,
    sample_rate: u32,
    noise: f64,
) -> Vec<f32> {
    let sr = sample_rate as f64;
    let n = sample_rate as usize;
    let mut out = vec![0.0f64; n];
    let total = (0.55 * voice.rate * rng.random_range(0.9..1.1)).min(0.85);
    let onset = rng.random_range(0.05..(0.95 - total));
    let weights: f64 = segments.iter().map(|s| s.weight).sum();
    let mut start = onset;
    let mut phase = 0.0f64;
    for seg in segments {
        let dur = total * seg.weight / weights;
        let (a, b) = ((start * sr) as usize, (((start + dur) * sr) as usize).min(n));
        let formants = seg
            .formants
            .map(|f| f * voice.formant_scale * rng.random_range(0.9..1.1));
        let pitch = voice.pitch * rng.random_range(0.9..1.1);
        for (k, i) in (a..b).enumerate() {
            let u = k as f64 / (b - a).max(1) as f64;
            let f0 = pitch * (seg.f0 + (seg.f0_end - seg.f0) * u);
            phase += 2.0 * PI * f0 / sr;
            let env = (PI * u).sin().powf(0.5);
            let mut v = 0.0;
            let mut h = 1;
            while h as f64 * f0 < 0.45 * sr && h <= 40 {
                v += formant_gain(h as f64 * f0, &formants) * (h as f64 * phase).sin();
                h += 1;
            }
            out[i] += env * v;
        }
        start += dur;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    let gain = rng.random_range(0.25..0.7) / peak;
    let noise = Normal::new(0.0, noise).expect("noise level is finite and non-negative");
    out.iter()
        .map(|v| (v * gain + noise.sample(rng)).clamp(-1.0, 32767.0 / 32768.0) as f32)
        .collect()
}

pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<(), DatasetError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| DatasetError::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        w.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
            .map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

/// Writes `<root>/<keyword>/<speaker>_nohash_<take>.wav` for every keyword,
/// speaker and take, returning the written paths in creation order.
pub fn generate(root: &Path, config: &SynthConfig) -> Result<Vec<PathBuf>, DatasetError> {
    let mut written = Vec::new();
    let speakers: Vec<String> = (0..config.speakers).map(|i| speaker_id(config.seed, i)).collect();
    for keyword in &config.keywords {
        let dir = root.join(keyword);
        fs::create_dir_all(&dir).map_err(|source| DatasetError::Io {
            path: dir.clone(),
            source,
        })?;
        let segments = word_segments(keyword);
        for speaker in &speakers {
            let voice = speaker_voice(config.seed, speaker);
            for take in 0..config.takes_per_speaker {
                let mut rng = hashed_rng(config.seed, &["take", keyword, speaker, &take.to_string()]);
                let samples = render(&segments, voice, &mut rng, config.sample_rate, config.noise);
                let path = dir.join(format!("{speaker}_nohash_{take}.wav"));
                write_wav(&path, &samples, config.sample_rate)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
