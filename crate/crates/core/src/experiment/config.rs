//! Flat `section.key = value` configuration documents.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataset::{SplitRatios, Subset};
use crate::features::MfccConfig;
use crate::model::Architecture;
use crate::rl::{ActionMode, RlConfig};

use super::ExperimentError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Benchmark,
    Rl,
    Compare,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Benchmark => "benchmark",
            Mode::Rl => "rl",
            Mode::Compare => "compare",
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "benchmark" => Ok(Mode::Benchmark),
            "rl" => Ok(Mode::Rl),
            "compare" => Ok(Mode::Compare),
            _ => Err(format!("unknown mode {s:?} (benchmark, rl, compare)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Binary subset, 2,000 episodes, smaller dense stack, no wall-clock
    /// column: minutes of CPU and reproducible byte for byte.
    Desk,
    /// Full-size settings.
    Paper,
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(format!("unknown profile {s:?} (desk, paper)")),
        }
    }
}

/// Layer sizes of the policy network; input shape and class count come from
/// the features and the subset.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub conv_filters: [usize; 2],
    pub kernel_size: usize,
    pub pool: usize,
    pub lstm_hidden: usize,
    pub dense: Vec<usize>,
    pub dropout: f64,
    pub input_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let a = Architecture::new(1, 1, 2);
        Self {
            conv_filters: a.conv_filters,
            kernel_size: a.kernel_size,
            pool: a.pool,
            lstm_hidden: a.lstm_hidden,
            dense: a.dense,
            dropout: a.dropout,
            input_scale: a.input_scale,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self, n_mfcc: usize, n_frames: usize, num_classes: usize) -> Architecture {
        Architecture {
            n_mfcc,
            n_frames,
            num_classes,
            conv_filters: self.conv_filters,
            kernel_size: self.kernel_size,
            pool: self.pool,
            lstm_hidden: self.lstm_hidden,
            dense: self.dense.clone(),
            dropout: self.dropout,
            input_scale: self.input_scale,
        }
    }
}

/// Supervised benchmark training.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Share of the benchmark training partition held out for early stopping.
    pub val_split: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            val_split: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub subset: Subset,
    pub corpus_root: PathBuf,
    pub out_dir: PathBuf,
    /// Feature cache directory; `None` disables caching.
    pub cache_dir: Option<PathBuf>,
    pub split: SplitRatios,
    pub mfcc: MfccConfig,
    pub model: ModelConfig,
    pub rl: RlConfig,
    pub benchmark: BenchmarkConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::profile(Profile::Paper)
    }
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        let full = Self {
            mode: Mode::Compare,
            subset: Subset::Binary,
            corpus_root: PathBuf::from("data/speech_commands_v0.02"),
            out_dir: PathBuf::from("runs/paper"),
            cache_dir: Some(PathBuf::from("runs/feature-cache")),
            split: SplitRatios::default(),
            mfcc: MfccConfig::default(),
            model: ModelConfig::default(),
            rl: RlConfig::default(),
            benchmark: BenchmarkConfig::default(),
        };
        match profile {
            Profile::Paper => full,
            Profile::Desk => Self {
                out_dir: PathBuf::from("runs/desk"),
                model: ModelConfig {
                    dense: vec![128, 64, 32],
                    ..full.model
                },
                rl: RlConfig {
                    num_episodes: 2000,
                    record_wall_ms: false,
                    ..full.rl
                },
                ..full
            },
        }
    }

    pub fn architecture(&self, n_frames: usize) -> Architecture {
        self.model
            .architecture(self.mfcc.n_mfcc, n_frames, self.subset.keywords().len())
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(super::io_err(path))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), ExperimentError> {
        std::fs::write(path, self.to_text()).map_err(super::io_err(path))
    }

    /// Starts from the full-scale profile and applies every `key = value` line.
    pub fn from_text(text: &str) -> Result<Self, ExperimentError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies every `key = value` line on top of the current values. Blank
    /// lines and `#` comments are ignored; unknown keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ExperimentError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ExperimentError::ConfigLine {
                    line: i + 1,
                    reason: format!("expected `section.key = value`, got {line:?}"),
                });
            };
            self.set(key.trim(), value.trim())
                .map_err(|reason| ExperimentError::ConfigLine { line: i + 1, reason })?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let s = key.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = s;
            }
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let f = |v: f64| format!("{v:?}");
        let opt_f = |v: Option<f64>| v.map_or("none".to_string(), f);
        let list = |v: &[usize]| {
            if v.is_empty() {
                return "none".to_string();
            }
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        let m = &self.mfcc;
        let r = &self.rl;
        let b = &self.benchmark;
        vec![
            ("experiment.mode", self.mode.as_str().into()),
            ("experiment.subset", self.subset.as_str().into()),
            ("experiment.corpus_root", self.corpus_root.display().to_string()),
            ("experiment.out_dir", self.out_dir.display().to_string()),
            (
                "experiment.cache_dir",
                self.cache_dir
                    .as_ref()
                    .map_or("none".into(), |p| p.display().to_string()),
            ),
            ("split.pretrain", f(self.split.pretrain)),
            ("split.bench_train", f(self.split.bench_train)),
            ("mfcc.n_mfcc", m.n_mfcc.to_string()),
            ("mfcc.frame_length", m.frame_length.to_string()),
            ("mfcc.hop_length", m.hop_length.to_string()),
            ("mfcc.n_mels", m.n_mels.to_string()),
            ("mfcc.fmin", f(m.fmin)),
            ("mfcc.fmax", opt_f(m.fmax)),
            ("mfcc.log_floor", f(m.log_floor)),
            ("mfcc.top_db", opt_f(m.top_db)),
            ("mfcc.sample_rate", m.sample_rate.to_string()),
            ("model.conv_filters", list(&self.model.conv_filters)),
            ("model.kernel_size", self.model.kernel_size.to_string()),
            ("model.pool", self.model.pool.to_string()),
            ("model.lstm_hidden", self.model.lstm_hidden.to_string()),
            ("model.dense", list(&self.model.dense)),
            ("model.dropout", f(self.model.dropout)),
            ("model.input_scale", f(self.model.input_scale)),
            ("rl.eta", r.eta.to_string()),
            ("rl.num_episodes", r.num_episodes.to_string()),
            ("rl.gamma", f(r.gamma)),
            ("rl.sync_interval", r.sync_interval.to_string()),
            ("rl.rl_lr", f(r.rl_lr)),
            ("rl.pretrain_lr", f(r.pretrain_lr)),
            ("rl.pretrain_epochs", r.pretrain_epochs.to_string()),
            ("rl.pretrain_batch", r.pretrain_batch.to_string()),
            ("rl.pretrain_val_split", f(r.pretrain_val_split)),
            ("rl.huber_delta", f(r.huber_delta)),
            ("rl.seed", r.seed.to_string()),
            (
                "rl.action_mode",
                match r.action_mode {
                    ActionMode::Argmax => "argmax".into(),
                    ActionMode::Sample => "sample".into(),
                },
            ),
            ("rl.rolling_window", r.rolling_window.to_string()),
            ("rl.record_wall_ms", r.record_wall_ms.to_string()),
            ("benchmark.learning_rate", f(b.learning_rate)),
            ("benchmark.batch_size", b.batch_size.to_string()),
            ("benchmark.max_epochs", b.max_epochs.to_string()),
            ("benchmark.patience", b.patience.to_string()),
            ("benchmark.val_split", f(b.val_split)),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T, String>
        where
            T::Err: fmt::Display,
        {
            v.parse::<T>().map_err(|e| format!("{key}: cannot parse {v:?}: {e}"))
        }
        fn opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>, String>
        where
            T::Err: fmt::Display,
        {
            if v == "none" {
                Ok(None)
            } else {
                p(key, v).map(Some)
            }
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>, String> {
            if v == "none" {
                return Ok(Vec::new());
            }
            v.split(',').map(|x| p(key, x.trim())).collect()
        }
        let m = &mut self.mfcc;
        let r = &mut self.rl;
        let b = &mut self.benchmark;
        match key {
            "experiment.mode" => self.mode = p(key, value)?,
            "experiment.subset" => self.subset = p(key, value)?,
            "experiment.corpus_root" => self.corpus_root = PathBuf::from(value),
            "experiment.out_dir" => self.out_dir = PathBuf::from(value),
            "experiment.cache_dir" => self.cache_dir = opt(key, value)?,
            "split.pretrain" => self.split.pretrain = p(key, value)?,
            "split.bench_train" => self.split.bench_train = p(key, value)?,
            "mfcc.n_mfcc" => m.n_mfcc = p(key, value)?,
            "mfcc.frame_length" => m.frame_length = p(key, value)?,
            "mfcc.hop_length" => m.hop_length = p(key, value)?,
            "mfcc.n_mels" => m.n_mels = p(key, value)?,
            "mfcc.fmin" => m.fmin = p(key, value)?,
            "mfcc.fmax" => m.fmax = opt(key, value)?,
            "mfcc.log_floor" => m.log_floor = p(key, value)?,
            "mfcc.top_db" => m.top_db = opt(key, value)?,
            "mfcc.sample_rate" => m.sample_rate = p(key, value)?,
            "model.conv_filters" => {
                let v = list(key, value)?;
                self.model.conv_filters = v
                    .try_into()
                    .map_err(|_| format!("{key}: expected two comma-separated sizes"))?;
            }
            "model.kernel_size" => self.model.kernel_size = p(key, value)?,
            "model.pool" => self.model.pool = p(key, value)?,
            "model.lstm_hidden" => self.model.lstm_hidden = p(key, value)?,
            "model.dense" => self.model.dense = list(key, value)?,
            "model.dropout" => self.model.dropout = p(key, value)?,
            "model.input_scale" => self.model.input_scale = p(key, value)?,
            "rl.eta" => r.eta = p(key, value)?,
            "rl.num_episodes" => r.num_episodes = p(key, value)?,
            "rl.gamma" => r.gamma = p(key, value)?,
            "rl.sync_interval" => r.sync_interval = p(key, value)?,
            "rl.rl_lr" => r.rl_lr = p(key, value)?,
            "rl.pretrain_lr" => r.pretrain_lr = p(key, value)?,
            "rl.pretrain_epochs" => r.pretrain_epochs = p(key, value)?,
            "rl.pretrain_batch" => r.pretrain_batch = p(key, value)?,
            "rl.pretrain_val_split" => r.pretrain_val_split = p(key, value)?,
            "rl.huber_delta" => r.huber_delta = p(key, value)?,
            "rl.seed" => r.seed = p(key, value)?,
            "rl.action_mode" => {
                r.action_mode = match value {
                    "argmax" => ActionMode::Argmax,
                    "sample" => ActionMode::Sample,
                    _ => return Err(format!("{key}: expected argmax or sample, got {value:?}")),
                }
            }
            "rl.rolling_window" => r.rolling_window = p(key, value)?,
            "rl.record_wall_ms" => r.record_wall_ms = p(key, value)?,
            "benchmark.learning_rate" => b.learning_rate = p(key, value)?,
            "benchmark.batch_size" => b.batch_size = p(key, value)?,
            "benchmark.max_epochs" => b.max_epochs = p(key, value)?,
            "benchmark.patience" => b.patience = p(key, value)?,
            "benchmark.val_split" => b.val_split = p(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }
}
