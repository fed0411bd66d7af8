//! Log-mel cepstral features.
//!
//! Framing, windowing, the Slaney-style mel filterbank, decibel scaling and
//! the orthonormal DCT follow the conventions of the librosa defaults, so
//! fixtures produced by that library can be compared directly.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{self, DatasetError, UtteranceMeta};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid MFCC configuration: {0}")]
    Config(String),
    #[error("cannot compute features of an empty signal")]
    EmptySignal,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("feature cache {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = FeatureError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct MfccConfig {
    pub n_mfcc: usize,
    pub frame_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub fmin: f64,
    /// `None` means the Nyquist frequency.
    pub fmax: Option<f64>,
    /// Power floor applied before taking decibels.
    pub log_floor: f64,
    /// Dynamic range limit below the loudest bin, in dB.
    pub top_db: Option<f64>,
    pub sample_rate: u32,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            n_mfcc: 40,
            frame_length: 2048,
            hop_length: 512,
            n_mels: 128,
            fmin: 0.0,
            fmax: None,
            log_floor: 1e-10,
            top_db: Some(80.0),
            sample_rate: 16_000,
        }
    }
}

impl MfccConfig {
    pub fn fmax(&self) -> f64 {
        self.fmax.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(FeatureError::Config(m));
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return err(format!("n_mfcc {} must be in 1..=n_mels ({})", self.n_mfcc, self.n_mels));
        }
        if self.frame_length < 2 || self.hop_length == 0 || self.hop_length > self.frame_length {
            return err(format!(
                "hop_length {} must be in 1..=frame_length ({})",
                self.hop_length, self.frame_length
            ));
        }
        if self.sample_rate == 0 {
            return err("sample_rate must be positive".into());
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.fmax() > nyquist || self.fmin < 0.0 || self.fmin >= self.fmax() {
            return err(format!(
                "need 0 <= fmin ({}) < fmax ({}) <= sample_rate / 2 ({nyquist})",
                self.fmin,
                self.fmax()
            ));
        }
        if self.log_floor.is_nan() || self.log_floor <= 0.0 {
            return err(format!("log_floor {} must be positive", self.log_floor));
        }
        Ok(())
    }

    /// Frames produced for a signal of `num_samples` under centred framing.
    pub fn num_frames(&self, num_samples: usize) -> usize {
        1 + num_samples / self.hop_length
    }

    /// Samples per utterance after padding or trimming: one second.
    pub fn utterance_len(&self) -> usize {
        self.sample_rate as usize
    }

    /// Stable digest of every field, used as part of feature cache keys.
    pub fn digest(&self) -> String {
        let text = format!(
            "n_mfcc={} frame={} hop={} n_mels={} fmin={:?} fmax={:?} floor={:?} top_db={:?} sr={}",
            self.n_mfcc,
            self.frame_length,
            self.hop_length,
            self.n_mels,
            self.fmin,
            self.fmax(),
            self.log_floor,
            self.top_db,
            self.sample_rate
        );
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}

/// `n_mfcc × n_frames` coefficients, row-major (one row per coefficient).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_mfcc: usize,
    n_frames: usize,
    coeffs: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(n_mfcc: usize, n_frames: usize, coeffs: Vec<f32>) -> Option<Self> {
        (coeffs.len() == n_mfcc * n_frames).then_some(Self {
            n_mfcc,
            n_frames,
            coeffs,
        })
    }

    pub fn n_mfcc(&self) -> usize {
        self.n_mfcc
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn coeffs(&self) -> &[f32] {
        &self.coeffs
    }

    pub fn get(&self, coeff: usize, frame: usize) -> f32 {
        self.coeffs[coeff * self.n_frames + frame]
    }

    /// Frame-major copy: `n_frames × n_mfcc`.
    pub fn transposed(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.coeffs.len()];
        for c in 0..self.n_mfcc {
            for f in 0..self.n_frames {
                out[f * self.n_mfcc + c] = self.coeffs[c * self.n_frames + f];
            }
        }
        out
    }
}

/// Mel power spectrogram, `n_mels × n_frames`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub n_mels: usize,
    pub n_frames: usize,
    pub power: Vec<f64>,
}

/// Index into a signal of length `n` under numpy-style `reflect` padding
/// (edge sample not repeated).
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Periodic Hann window.
fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        F_SP * mel
    }
}

/// Triangular, area-normalised mel filters, `n_mels × (frame_length/2 + 1)`.
pub fn mel_filterbank(config: &MfccConfig) -> Vec<Vec<f64>> {
    let n_bins = config.frame_length / 2 + 1;
    let sr = config.sample_rate as f64;
    let fft_freqs: Vec<f64> = (0..n_bins)
        .map(|i| i as f64 * (sr / 2.0) / (n_bins - 1) as f64)
        .collect();
    let (lo, hi) = (hz_to_mel(config.fmin), hz_to_mel(config.fmax()));
    let n_pts = config.n_mels + 2;
    let mel_f: Vec<f64> = (0..n_pts)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_pts - 1) as f64))
        .collect();
    (0..config.n_mels)
        .map(|m| {
            let (f0, f1, f2) = (mel_f[m], mel_f[m + 1], mel_f[m + 2]);
            let enorm = 2.0 / (f2 - f0);
            fft_freqs
                .iter()
                .map(|&f| {
                    let lower = (f - f0) / (f1 - f0);
                    let upper = (f2 - f) / (f2 - f1);
                    lower.min(upper).max(0.0) * enorm
                })
                .collect()
        })
        .collect()
}

/// Centred, Hann-windowed power spectrogram projected onto the mel filters.
pub fn mel_spectrogram(samples: &[f32], config: &MfccConfig) -> Result<MelSpectrogram> {
    config.validate()?;
    if samples.is_empty() {
        return Err(FeatureError::EmptySignal);
    }
    let n_fft = config.frame_length;
    let n_bins = n_fft / 2 + 1;
    let pad = (n_fft / 2) as isize;
    let n = samples.len();
    let n_frames = config.num_frames(n);
    let window = hann(n_fft);
    let filters = mel_filterbank(config);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);

    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut spectrum = vec![0.0f64; n_bins];
    let mut power = vec![0.0f64; config.n_mels * n_frames];
    for t in 0..n_frames {
        let start = (t * config.hop_length) as isize - pad;
        for (k, slot) in buf.iter_mut().enumerate() {
            let x = samples[reflect_index(start + k as isize, n)] as f64;
            *slot = Complex::new(x * window[k], 0.0);
        }
        fft.process(&mut buf);
        for (s, c) in spectrum.iter_mut().zip(&buf[..n_bins]) {
            *s = c.norm_sqr();
        }
        for (m, filt) in filters.iter().enumerate() {
            power[m * n_frames + t] = filt.iter().zip(&spectrum).map(|(w, s)| w * s).sum();
        }
    }
    Ok(MelSpectrogram {
        n_mels: config.n_mels,
        n_frames,
        power,
    })
}

/// Decibels relative to 1.0 with a power floor and optional dynamic-range
/// clamp against the global maximum.
pub fn power_to_db(power: &[f64], log_floor: f64, top_db: Option<f64>) -> Vec<f64> {
    let mut db: Vec<f64> = power.iter().map(|&p| 10.0 * p.max(log_floor).log10()).collect();
    if let Some(top) = top_db {
        let max = db.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let floor = max - top;
        db.iter_mut().for_each(|v| *v = v.max(floor));
    }
    db
}

/// Orthonormal DCT-II basis rows `k = 0..n_out` over `n` inputs.
fn dct_basis(n: usize, n_out: usize) -> Vec<Vec<f64>> {
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            (0..n)
                .map(|i| scale * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos())
                .collect()
        })
        .collect()
}

pub fn mfcc(samples: &[f32], config: &MfccConfig) -> Result<FeatureMatrix> {
    let mel = mel_spectrogram(samples, config)?;
    let db = power_to_db(&mel.power, config.log_floor, config.top_db);
    let basis = dct_basis(mel.n_mels, config.n_mfcc);
    let f = mel.n_frames;
    let mut coeffs = vec![0.0f32; config.n_mfcc * f];
    for (k, row) in basis.iter().enumerate() {
        for t in 0..f {
            let v: f64 = row.iter().enumerate().map(|(m, b)| b * db[m * f + t]).sum();
            coeffs[k * f + t] = v as f32;
        }
    }
    Ok(FeatureMatrix {
        n_mfcc: config.n_mfcc,
        n_frames: f,
        coeffs,
    })
}

/// Linear-interpolation resampling, used only when the analysis rate differs
/// from the file's native rate.
pub fn resample_linear(samples: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let out_len = ((samples.len() as u64 * to as u64) / from as u64).max(1) as usize;
    let ratio = from as f64 / to as f64;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = pos.floor() as usize;
            let frac = pos - j as f64;
            let a = samples[j.min(samples.len() - 1)] as f64;
            let b = samples[(j + 1).min(samples.len() - 1)] as f64;
            (a + (b - a) * frac) as f32
        })
        .collect()
}

/// Features for one waveform at its native rate: resample if needed, pad or
/// trim to one second, then MFCC.
pub fn utterance_features(samples: &[f32], native_rate: u32, config: &MfccConfig) -> Result<FeatureMatrix> {
    let resampled = resample_linear(samples, native_rate, config.sample_rate);
    let fixed = dataset::pad_or_trim(&resampled, config.utterance_len());
    mfcc(&fixed, config)
}

const CACHE_MAGIC: &[u8; 4] = b"MFCC";
const CACHE_VERSION: u32 = 1;

/// Serialises a matrix in the cache layout: 16-byte header (magic, version,
/// n_mfcc, n_frames as little-endian `u32`) then row-major `f32` values.
pub fn encode_cache(m: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * m.coeffs.len());
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.n_mfcc as u32).to_le_bytes());
    out.extend_from_slice(&(m.n_frames as u32).to_le_bytes());
    for v in &m.coeffs {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses the cache layout; `None` for anything malformed.
pub fn decode_cache(bytes: &[u8], expect_mfcc: usize) -> Option<FeatureMatrix> {
    if bytes.len() < 16 || &bytes[..4] != CACHE_MAGIC {
        return None;
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    if word(4) != CACHE_VERSION as usize || word(8) != expect_mfcc {
        return None;
    }
    let (n_mfcc, n_frames) = (word(8), word(12));
    let body = &bytes[16..];
    if body.len() != 4 * n_mfcc * n_frames {
        return None;
    }
    let coeffs: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if coeffs.iter().any(|v| !v.is_finite()) {
        return None;
    }
    FeatureMatrix::new(n_mfcc, n_frames, coeffs)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: usize,
    pub computed: usize,
    pub corrupt: usize,
}

/// Extracts features for each utterance, memoised on disk under
/// `cache_dir` by (file content hash, config digest). Returns
/// `(features, class index)` pairs in input order.
pub fn extract_batch(
    utterances: &[UtteranceMeta],
    config: &MfccConfig,
    cache_dir: Option<&Path>,
) -> Result<(Vec<(FeatureMatrix, usize)>, CacheStats)> {
    config.validate()?;
    let mut stats = CacheStats::default();
    let digest = config.digest();
    if let Some(dir) = cache_dir {
        fs::create_dir_all(dir).map_err(|source| FeatureError::Cache {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let mut out = Vec::with_capacity(utterances.len());
    for meta in utterances {
        let Some(dir) = cache_dir else {
            let u = meta.load()?;
            out.push((utterance_features(&u.samples, u.sample_rate, config)?, meta.label));
            stats.computed += 1;
            continue;
        };
        let bytes = fs::read(&meta.path).map_err(|source| DatasetError::Io {
            path: meta.path.clone(),
            source,
        })?;
        let file_hash = hex::encode(&Sha256::digest(&bytes)[..16]);
        let entry = dir.join(format!("{file_hash}-{digest}.mfcc"));
        if let Ok(cached) = fs::read(&entry) {
            match decode_cache(&cached, config.n_mfcc) {
                Some(m) => {
                    stats.hits += 1;
                    out.push((m, meta.label));
                    continue;
                }
                None => {
                    warn!("corrupt feature cache entry {}, recomputing", entry.display());
                    stats.corrupt += 1;
                }
            }
        }
        let u = meta.load()?;
        let m = utterance_features(&u.samples, u.sample_rate, config)?;
        write_atomic(&entry, &encode_cache(&m))?;
        stats.computed += 1;
        out.push((m, meta.label));
    }
    Ok((out, stats))
}

/// Write to a temporary file in the same directory, then rename over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let io = |source| FeatureError::Cache {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}
