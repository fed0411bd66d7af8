//! Per-episode metrics and their rolling statistics.

use std::collections::VecDeque;

/// One row of a training run's metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMetrics {
    /// 1-based episode number.
    pub episode: usize,
    /// Fraction of correct steps in the episode.
    pub accuracy: f64,
    pub reward_sum: f64,
    pub loss: f64,
    pub rolling_mean: f64,
    pub rolling_std: f64,
    pub wall_ms: u64,
}

/// Mean and population standard deviation over the last `window` values
/// (or all values seen, while fewer than `window` exist).
#[derive(Debug, Clone)]
pub struct RollingStats {
    window: usize,
    values: VecDeque<f64>,
}

impl RollingStats {
    pub fn new(window: usize) -> Self {
        assert!(window > 0, "rolling window must be positive");
        Self {
            window,
            values: VecDeque::with_capacity(window),
        }
    }

    pub fn push(&mut self, v: f64) -> (f64, f64) {
        if self.values.len() == self.window {
            self.values.pop_front();
        }
        self.values.push_back(v);
        self.current()
    }

    pub fn current(&self) -> (f64, f64) {
        mean_std(self.values.iter().copied())
    }
}

/// Mean and population standard deviation; `(0, 0)` when empty.
pub fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}
