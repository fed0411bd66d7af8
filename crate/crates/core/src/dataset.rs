//! Speech Commands corpus: keyword subsets, directory scanning, WAV loading
//! and deterministic stratified splits.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// The twenty "main" command words, in the corpus documentation's order.
pub const MAIN_COMMANDS: [&str; 20] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "down", "go", "left",
    "no", "off", "on", "right", "stop", "up", "yes", "zero",
];

/// The ten auxiliary words.
pub const SUB_COMMANDS: [&str; 10] = [
    "bed", "bird", "cat", "dog", "happy", "house", "marvin", "sheila", "tree", "wow",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("corpus root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),
    #[error("corpus at {root} has no audio for class(es): {}", missing.join(", "))]
    MissingClasses { root: PathBuf, missing: Vec<String> },
    #[error("{path}: unsupported WAV format: {property}")]
    UnsupportedFormat { path: PathBuf, property: String },
    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("class '{keyword}' has {count} item(s); at least 2 are needed to stratify")]
    TooFewItems { keyword: String, count: usize },
    #[error("split ratio {0} must lie strictly between 0 and 1")]
    BadRatio(f64),
    #[error("unknown subset '{0}' (expected binary, main20 or all30)")]
    UnknownSubset(String),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Subset {
    Binary,
    Main20,
    All30,
}

impl Subset {
    pub fn keywords(self) -> Vec<&'static str> {
        match self {
            Subset::Binary => vec!["left", "right"],
            Subset::Main20 => MAIN_COMMANDS.to_vec(),
            Subset::All30 => MAIN_COMMANDS.iter().chain(&SUB_COMMANDS).copied().collect(),
        }
    }

    pub fn spec(self) -> SubsetSpec {
        SubsetSpec {
            name: self,
            keywords: self.keywords(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Binary => "binary",
            Subset::Main20 => "main20",
            Subset::All30 => "all30",
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subset {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Subset::Binary),
            "main20" => Ok(Subset::Main20),
            "all30" => Ok(Subset::All30),
            other => Err(DatasetError::UnknownSubset(other.to_string())),
        }
    }
}

/// Ordered class list; the class index is the position in `keywords`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetSpec {
    pub name: Subset,
    pub keywords: Vec<&'static str>,
}

impl SubsetSpec {
    pub fn num_classes(&self) -> usize {
        self.keywords.len()
    }

    pub fn index_of(&self, keyword: &str) -> Option<usize> {
        self.keywords.iter().position(|k| *k == keyword)
    }

    pub fn keyword(&self, index: usize) -> Option<&'static str> {
        self.keywords.get(index).copied()
    }
}

/// A corpus entry before its audio is read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtteranceMeta {
    pub keyword: String,
    pub label: usize,
    /// Hash segment of the file name (the part before `_nohash_`).
    pub speaker_id: String,
    pub path: PathBuf,
    /// Path relative to the corpus root, `/`-separated. Used as split key.
    pub rel_path: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub meta: UtteranceMeta,
    /// Mono samples scaled into `[-1, 1)`.
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

/// Lists every WAV in the subset's keyword directories, sorted by relative
/// path.
pub fn scan_corpus(root: &Path, subset: &SubsetSpec) -> Result<Vec<UtteranceMeta>> {
    if !root.is_dir() {
        return Err(DatasetError::MissingRoot(root.to_path_buf()));
    }
    let mut out = Vec::new();
    let mut missing = Vec::new();
    for (label, keyword) in subset.keywords.iter().enumerate() {
        let dir = root.join(keyword);
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(_) => {
                missing.push(keyword.to_string());
                continue;
            }
        };
        let before = out.len();
        for entry in entries {
            let entry = entry.map_err(|source| DatasetError::Io {
                path: dir.clone(),
                source,
            })?;
            let path = entry.path();
            let is_wav = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
            if !is_wav || !path.is_file() {
                continue;
            }
            let file_name = entry.file_name().to_string_lossy().into_owned();
            let speaker_id = file_name
                .split_once("_nohash_")
                .map(|(s, _)| s.to_string())
                .unwrap_or_else(|| file_name.trim_end_matches(".wav").to_string());
            out.push(UtteranceMeta {
                keyword: keyword.to_string(),
                label,
                speaker_id,
                rel_path: format!("{keyword}/{file_name}"),
                path,
            });
        }
        if out.len() == before {
            missing.push(keyword.to_string());
        }
    }
    if !missing.is_empty() {
        return Err(DatasetError::MissingClasses {
            root: root.to_path_buf(),
            missing,
        });
    }
    out.sort_by(|a, b| a.rel_path.cmp(&b.rel_path));
    Ok(out)
}

/// Reads a 16-bit mono PCM WAV file.
pub fn load_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let reader = hound::WavReader::open(path).map_err(|source| DatasetError::Wav {
        path: path.to_path_buf(),
        source,
    })?;
    let spec = reader.spec();
    let unsupported = |property: String| DatasetError::UnsupportedFormat {
        path: path.to_path_buf(),
        property,
    };
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(unsupported("sample format is floating point, expected PCM".into()));
    }
    if spec.channels != 1 {
        return Err(unsupported(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.bits_per_sample != 16 {
        return Err(unsupported(format!(
            "{} bits per sample, expected 16",
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|source| DatasetError::Wav {
            path: path.to_path_buf(),
            source,
        })?;
    Ok((samples, spec.sample_rate))
}

impl UtteranceMeta {
    pub fn load(&self) -> Result<Utterance> {
        let (samples, sample_rate) = load_wav(&self.path)?;
        Ok(Utterance {
            meta: self.clone(),
            samples,
            sample_rate,
        })
    }
}

/// Zero-pads or truncates at the end to exactly `target_len` samples.
pub fn pad_or_trim(samples: &[f32], target_len: usize) -> Vec<f32> {
    let mut out = samples[..samples.len().min(target_len)].to_vec();
    out.resize(target_len, 0.0);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    /// Share of each class used for supervised pre-training; the rest goes
    /// to the RL pool.
    pub pretrain: f64,
    /// Share of each class used to train the supervised benchmark; the rest
    /// is its test set.
    pub bench_train: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            pretrain: 0.10,
            bench_train: 0.80,
        }
    }
}

/// Indices into the scanned utterance list, per partition. Both families
/// cover the full subset independently.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub pretrain: Vec<usize>,
    pub rl_pool: Vec<usize>,
    pub bench_train: Vec<usize>,
    pub bench_test: Vec<usize>,
}

fn split_key(seed: u64, family: &str, rel_path: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(family.as_bytes());
    h.update([0]);
    h.update(rel_path.as_bytes());
    h.finalize().into()
}

/// Splits `items` (given as `(label, key)`) per class: within each class the
/// items are ordered by a salted hash of their key and the first
/// `round(ratio * n)` go to the first partition.
///
/// Returns `(first, second)` as sorted index lists.
pub fn stratified_partition(
    items: &[(usize, &str)],
    ratio: f64,
    seed: u64,
    family: &str,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::BadRatio(ratio));
    }
    let mut by_class: BTreeMap<usize, Vec<(usize, [u8; 32])>> = BTreeMap::new();
    for (i, (label, key)) in items.iter().enumerate() {
        by_class
            .entry(*label)
            .or_default()
            .push((i, split_key(seed, family, key)));
    }
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (label, mut members) in by_class {
        if members.len() < 2 {
            let keyword = items
                .iter()
                .find(|(l, _)| *l == label)
                .map(|(_, k)| k.split('/').next().unwrap_or(k).to_string())
                .unwrap_or_default();
            return Err(DatasetError::TooFewItems {
                keyword,
                count: members.len(),
            });
        }
        members.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
        let take = ((ratio * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        first.extend(members[..take].iter().map(|m| m.0));
        second.extend(members[take..].iter().map(|m| m.0));
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((first, second))
}

pub fn split(utterances: &[UtteranceMeta], ratios: SplitRatios, seed: u64) -> Result<SplitAssignment> {
    let items: Vec<(usize, &str)> = utterances
        .iter()
        .map(|u| (u.label, u.rel_path.as_str()))
        .collect();
    let (pretrain, rl_pool) = stratified_partition(&items, ratios.pretrain, seed, "pretrain")?;
    let (bench_train, bench_test) =
        stratified_partition(&items, ratios.bench_train, seed, "benchmark")?;
    Ok(SplitAssignment {
        pretrain,
        rl_pool,
        bench_train,
        bench_test,
    })
}

impl SplitAssignment {
    pub fn partitions(&self) -> [(&'static str, &[usize]); 4] {
        [
            ("pretrain", &self.pretrain),
            ("rl", &self.rl_pool),
            ("bench_train", &self.bench_train),
            ("bench_test", &self.bench_test),
        ]
    }

    /// Writes `partition<TAB>relative_path` lines.
    pub fn write_manifest(&self, utterances: &[UtteranceMeta], path: &Path) -> Result<()> {
        let io = |source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
        for (name, idx) in self.partitions() {
            for &i in idx {
                writeln!(out, "{name}\t{}", utterances[i].rel_path).map_err(io)?;
            }
        }
        out.flush().map_err(io)
    }
}
