//! Side-by-side summary of the runs with and without pre-training.

use std::fmt::Write as _;

use crate::metrics::{mean_std, EpisodeMetrics};

/// Summary of one arm's metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmSummary {
    pub episodes: usize,
    /// Mean accuracy over the first `initial_window` episodes.
    pub initial_mean: f64,
    /// Mean accuracy over the last `tail` episodes.
    pub last_mean: f64,
    /// Population std of the accuracy over the first `initial_window` episodes.
    pub initial_std: f64,
    /// Population std of the accuracy over the last `initial_window` episodes.
    pub final_std: f64,
    pub final_rolling_mean: f64,
}

impl ArmSummary {
    pub fn from_metrics(metrics: &[EpisodeMetrics], initial_window: usize, tail: usize) -> Self {
        let acc = |ms: &[EpisodeMetrics]| ms.iter().map(|m| m.accuracy).collect::<Vec<_>>();
        let head = acc(&metrics[..initial_window.min(metrics.len())]);
        let last = acc(&metrics[metrics.len().saturating_sub(tail)..]);
        let last_window = acc(&metrics[metrics.len().saturating_sub(initial_window)..]);
        let (initial_mean, initial_std) = mean_std(head.iter().copied());
        let (last_mean, _) = mean_std(last.iter().copied());
        let (_, final_std) = mean_std(last_window.iter().copied());
        Self {
            episodes: metrics.len(),
            initial_mean,
            last_mean,
            initial_std,
            final_std,
            final_rolling_mean: metrics.last().map_or(0.0, |m| m.rolling_mean),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub subset: String,
    pub initial_window: usize,
    pub tail: usize,
    pub with: ArmSummary,
    pub without: ArmSummary,
}

impl ComparisonReport {
    pub fn new(
        subset: &str,
        with: &[EpisodeMetrics],
        without: &[EpisodeMetrics],
        initial_window: usize,
        tail: usize,
    ) -> Self {
        Self {
            subset: subset.to_string(),
            initial_window,
            tail,
            with: ArmSummary::from_metrics(with, initial_window, tail),
            without: ArmSummary::from_metrics(without, initial_window, tail),
        }
    }

    pub fn delta_initial(&self) -> f64 {
        self.with.initial_mean - self.without.initial_mean
    }

    pub fn delta_last(&self) -> f64 {
        self.with.last_mean - self.without.last_mean
    }

    pub fn delta_final_rolling(&self) -> f64 {
        self.with.final_rolling_mean - self.without.final_rolling_mean
    }

    /// Fixed-width table; accuracies in percent, two decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "subset {}: {} episodes with pre-training, {} without",
            self.subset, self.with.episodes, self.without.episodes
        );
        let _ = writeln!(s, "{:<34}{:>10}{:>10}{:>10}", "", "w/", "w/o", "delta");
        let row = |s: &mut String, name: String, a: f64, b: f64| {
            let _ = writeln!(s, "{name:<34}{:>10.2}{:>10.2}{:>10.2}", a, b, a - b);
        };
        let pct = 100.0;
        row(
            &mut s,
            format!("initial {} episodes accuracy %", self.initial_window),
            self.with.initial_mean * pct,
            self.without.initial_mean * pct,
        );
        row(
            &mut s,
            format!("last {} episodes accuracy %", self.tail),
            self.with.last_mean * pct,
            self.without.last_mean * pct,
        );
        row(
            &mut s,
            "final rolling mean accuracy %".into(),
            self.with.final_rolling_mean * pct,
            self.without.final_rolling_mean * pct,
        );
        row(
            &mut s,
            format!("std of first {} episodes %", self.initial_window),
            self.with.initial_std * pct,
            self.without.initial_std * pct,
        );
        row(
            &mut s,
            format!("std of last {} episodes %", self.initial_window),
            self.with.final_std * pct,
            self.without.final_std * pct,
        );
        s
    }
}
