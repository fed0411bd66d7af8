//! Keyword spotting on the Speech Commands corpus treated as an episodic
//! decision problem: corpus handling, MFCC features, the CNN-LSTM policy,
//! supervised pre-training and the target-model training loop, plus the
//! experiment plumbing around them.

pub mod dataset;
pub mod experiment;
pub mod features;
pub mod metrics;
pub mod model;
pub mod rl;
pub mod supervised;
pub mod synth;

use thiserror::Error;

/// Any failure from this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Features(#[from] features::FeatureError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Train(#[from] supervised::TrainError),
    #[error(transparent)]
    Rl(#[from] rl::RlError),
    #[error(transparent)]
    Experiment(#[from] experiment::ExperimentError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
