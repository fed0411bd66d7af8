//! Per-episode metrics as CSV, one flushed row per episode.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::metrics::EpisodeMetrics;

use super::{io_err, ExperimentError};

pub const HEADER: &str = "episode,accuracy,reward_sum,loss,rolling_mean,rolling_std,wall_ms";

/// Shortest decimal for `v` rounded to six significant digits.
pub fn format_value(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let rounded: f64 = format!("{v:.5e}").parse().unwrap_or(v);
    if rounded == 0.0 {
        return "0".into();
    }
    format!("{rounded}")
}

pub fn format_row(m: &EpisodeMetrics) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        m.episode,
        format_value(m.accuracy),
        format_value(m.reward_sum),
        format_value(m.loss),
        format_value(m.rolling_mean),
        format_value(m.rolling_std),
        m.wall_ms
    )
}

/// Appends rows as they arrive so that an interrupted run leaves a valid
/// prefix behind.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
    rows: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, ExperimentError> {
        let mut file = File::create(path).map_err(io_err(path))?;
        writeln!(file, "{HEADER}").map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            rows: 0,
        })
    }

    pub fn write(&mut self, m: &EpisodeMetrics) -> Result<(), ExperimentError> {
        writeln!(self.file, "{}", format_row(m)).map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))?;
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn write_metrics_csv(metrics: &[EpisodeMetrics], path: &Path) -> Result<(), ExperimentError> {
    let mut w = MetricsWriter::create(path)?;
    for m in metrics {
        w.write(m)?;
    }
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpisodeMetrics>, ExperimentError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let bad = |line: usize, reason: String| ExperimentError::Csv {
        path: path.to_path_buf(),
        line,
        reason,
    };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if i == 0 {
            if line.trim() != HEADER {
                return Err(bad(1, format!("unexpected header {line:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(bad(i + 1, format!("expected 7 columns, found {}", cols.len())));
        }
        let num = |c: usize| -> Result<f64, ExperimentError> {
            cols[c]
                .parse()
                .map_err(|_| bad(i + 1, format!("column {} is not a number: {:?}", c + 1, cols[c])))
        };
        let int = |c: usize| -> Result<u64, ExperimentError> {
            cols[c]
                .parse()
                .map_err(|_| bad(i + 1, format!("column {} is not an integer: {:?}", c + 1, cols[c])))
        };
        out.push(EpisodeMetrics {
            episode: int(0)? as usize,
            accuracy: num(1)?,
            reward_sum: num(2)?,
            loss: num(3)?,
            rolling_mean: num(4)?,
            rolling_std: num(5)?,
            wall_ms: int(6)?,
        });
    }
    Ok(out)
}
