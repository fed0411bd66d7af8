//! Supervised training of the policy architecture with cross-entropy and
//! SGD. Used both for pre-training and for the supervised benchmark.

use std::ops::Range;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use rlkws_nn::{argmax, Graph, Optimizer, Scalar};
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::model::{self, ModelError, PolicyParams};

/// A labelled feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: FeatureMatrix,
    pub label: usize,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] rlkws_nn::NnError),
    #[error("training set is empty")]
    Empty,
    #[error("class {0} has no training examples")]
    MissingClass(usize),
    #[error("label {label} out of range for {num_classes} classes")]
    BadLabel { label: usize, num_classes: usize },
    #[error("loss became non-finite ({loss}) at {at}")]
    Diverged { at: String, loss: f64 },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a validation-accuracy improvement
    /// and restore the best parameters. `None` trains all epochs and keeps
    /// the final ones.
    pub patience: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub epochs: Vec<EpochReport>,
    /// Epoch whose parameters were kept (1-based).
    pub kept_epoch: usize,
}

/// Consecutive batch ranges; the last batch holds the remainder.
pub fn batch_ranges(n: usize, batch: usize) -> Vec<Range<usize>> {
    assert!(batch > 0, "batch size must be positive");
    (0..n).step_by(batch).map(|s| s..(s + batch).min(n)).collect()
}

/// Every class in `0..num_classes` must appear, and no label may exceed it.
pub fn check_classes(samples: &[&Sample], num_classes: usize) -> Result<()> {
    if samples.is_empty() {
        return Err(TrainError::Empty);
    }
    let mut seen = vec![false; num_classes];
    for s in samples {
        *seen.get_mut(s.label).ok_or(TrainError::BadLabel {
            label: s.label,
            num_classes,
        })? = true;
    }
    match seen.iter().position(|s| !s) {
        Some(c) => Err(TrainError::MissingClass(c)),
        None => Ok(()),
    }
}

/// Mean cross-entropy and accuracy in inference mode.
pub fn evaluate<T: Scalar>(params: &PolicyParams<T>, samples: &[&Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for s in samples {
        let p = model::predict(params, &s.features)?;
        loss -= (p[s.label].f64() + 1e-12).ln();
        correct += usize::from(argmax(&p) == s.label);
    }
    let n = samples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// One SGD step on a mini-batch; returns the batch's summed loss and number
/// of correct training-mode predictions.
fn train_batch<T: Scalar, R: Rng + ?Sized>(
    params: &mut PolicyParams<T>,
    optimizer: &mut Optimizer,
    batch: &[&Sample],
    rng: &mut R,
) -> Result<(f64, usize)> {
    let mut grads = params.zeros_like();
    let seed = T::of(1.0 / batch.len() as f64);
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for s in batch {
        let mut g = Graph::new(params.tensors());
        let probs = model::build(&mut g, params.arch(), &s.features, true, rng)?;
        correct += usize::from(argmax(g.value(probs).data()) == s.label);
        let loss = g.cross_entropy(probs, s.label)?;
        loss_sum += g.value(loss).data()[0].f64();
        g.backward(loss, seed).accumulate_params(&g, &mut grads);
    }
    optimizer.step(params.tensors_mut(), &grads)?;
    Ok((loss_sum, correct))
}

/// Mini-batch SGD on cross-entropy, shuffling every epoch with `rng`.
pub fn fit<T: Scalar, R: Rng + ?Sized>(
    params: &mut PolicyParams<T>,
    train: &[&Sample],
    val: &[&Sample],
    config: &FitConfig,
    rng: &mut R,
) -> Result<FitReport> {
    check_classes(train, params.arch().num_classes)?;
    let mut optimizer = Optimizer::sgd(config.learning_rate);
    let mut order: Vec<&Sample> = train.to_vec();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, PolicyParams<T>)> = None;
    for epoch in 1..=config.epochs {
        order.shuffle(rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for r in batch_ranges(order.len(), config.batch_size) {
            let (l, c) = train_batch(params, &mut optimizer, &order[r], rng)?;
            loss_sum += l;
            correct += c;
        }
        let train_loss = loss_sum / order.len() as f64;
        if !train_loss.is_finite() {
            return Err(TrainError::Diverged {
                at: format!("epoch {epoch}"),
                loss: train_loss,
            });
        }
        let (val_loss, val_accuracy) = if val.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate(params, val)?;
            (Some(l), Some(a))
        };
        let report = EpochReport {
            epoch,
            train_loss,
            train_accuracy: correct as f64 / order.len() as f64,
            val_loss,
            val_accuracy,
        };
        info!(
            "epoch {epoch}: train loss {:.4} acc {:.4}, val loss {:?} acc {:?}",
            report.train_loss, report.train_accuracy, report.val_loss, report.val_accuracy
        );
        epochs.push(report);

        if let (Some(patience), Some(acc)) = (config.patience, val_accuracy) {
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, params.clone()));
            } else if epoch - best.as_ref().map_or(0, |b| b.1) >= patience {
                break;
            }
        }
    }
    let kept_epoch = match best {
        Some((_, epoch, p)) => {
            *params = p;
            epoch
        }
        None => epochs.len(),
    };
    Ok(FitReport { epochs, kept_epoch })
}

/// Keras-style hold-out: shuffle with `rng`, keep the last `fraction` (at
/// least one item when `fraction > 0`) for validation.
pub fn holdout<'a, R: Rng + ?Sized>(
    samples: &[&'a Sample],
    fraction: f64,
    rng: &mut R,
) -> (Vec<&'a Sample>, Vec<&'a Sample>) {
    let mut v = samples.to_vec();
    v.shuffle(rng);
    if fraction <= 0.0 || v.len() < 2 {
        return (v, Vec::new());
    }
    let n_val = ((fraction * v.len() as f64).round() as usize).clamp(1, v.len() - 1);
    let val = v.split_off(v.len() - n_val);
    (v, val)
}
