//! Experiment configuration, metrics files, plots, the comparison report and
//! the runners that tie the pipeline together.

mod config;
pub mod csv;
pub mod plot;
pub mod report;
mod runner;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{BenchmarkConfig, ExperimentConfig, Mode, ModelConfig, Profile};
pub use runner::{
    arm_names, prepare, run_benchmark, run_compare, run_features, run_pretrain, run_rl,
    BenchmarkOutcome, CompareOutcome, FeaturesOutcome, Prepared, PretrainOutcome, RlOutcome,
    ARM_WITH, ARM_WITHOUT,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config line {line}: {reason}")]
    ConfigLine { line: usize, reason: String },
    #[error("config key {key}: {reason}")]
    ConfigValue { key: String, reason: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: line {line}: {reason}", path.display())]
    Csv {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{} holds no episodes", .0.display())]
    EmptyCsv(PathBuf),
    #[error("nothing to plot")]
    NoSeries,
    #[error("partition {partition} is empty")]
    EmptyPartition { partition: &'static str },
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> ExperimentError {
    let path = path.into();
    move |source| ExperimentError::Io { path, source }
}
