//! Line charts of metrics CSVs as standalone SVG.

use std::fmt::Write as _;
use std::path::Path;

use super::csv::read_metrics_csv;
use super::{io_err, ExperimentError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// Rolling mean of the episode accuracy.
    Accuracy,
    /// Rolling standard deviation of the episode accuracy.
    Stddev,
}

impl std::str::FromStr for PlotKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "accuracy" => Ok(PlotKind::Accuracy),
            "stddev" => Ok(PlotKind::Stddev),
            _ => Err(format!("unknown plot kind {s:?} (accuracy, stddev)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    /// `(episode, value)` pairs.
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn nice_ceiling(v: f64) -> f64 {
    ((v / 0.05).ceil() * 0.05).max(0.05)
}

pub fn render_svg(series: &[Series], kind: PlotKind) -> Result<String, ExperimentError> {
    if series.is_empty() {
        return Err(ExperimentError::NoSeries);
    }
    let x_max = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .fold(1.0f64, f64::max);
    let (y_max, y_label) = match kind {
        PlotKind::Accuracy => (1.0, "accuracy (rolling mean)"),
        PlotKind::Stddev => {
            let m = series
                .iter()
                .flat_map(|s| s.points.iter().map(|p| p.1))
                .filter(|v| v.is_finite())
                .fold(0.0f64, f64::max);
            (nice_ceiling(m), "accuracy standard deviation (rolling)")
        }
    };
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + pw * (x - 1.0) / (x_max - 1.0).max(1.0);
    let sy = |y: f64| TOP + ph * (1.0 - y.clamp(0.0, y_max) / y_max);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    for i in 0..=5 {
        let v = y_max * i as f64 / 5.0;
        let y = sy(v);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.2}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0
        );
    }
    for i in 0..=5 {
        let v = 1.0 + (x_max - 1.0) * i as f64 / 5.0;
        let x = sx(v);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 20.0,
            v.round()
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">episode</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{y_label}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for (i, series) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = series
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = TOP + 20.0 + 20.0 * i as f64;
        let lx = LEFT + pw + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}">{}</text>"#,
            lx + 25.0,
            lx + 32.0,
            ly + 4.0,
            escape(&series.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Reads each `(label, csv)` and writes one chart with a line per CSV.
pub fn render_plot(
    csvs: &[(String, &Path)],
    kind: PlotKind,
    out: &Path,
) -> Result<(), ExperimentError> {
    let mut series = Vec::with_capacity(csvs.len());
    for (label, path) in csvs {
        let rows = read_metrics_csv(path)?;
        if rows.is_empty() {
            return Err(ExperimentError::EmptyCsv(path.to_path_buf()));
        }
        let points = rows
            .iter()
            .map(|m| {
                let v = match kind {
                    PlotKind::Accuracy => m.rolling_mean,
                    PlotKind::Stddev => m.rolling_std,
                };
                (m.episode as f64, v)
            })
            .collect();
        series.push(Series {
            label: label.clone(),
            points,
        });
    }
    let svg = render_svg(&series, kind)?;
    std::fs::write(out, svg).map_err(io_err(out))
}
