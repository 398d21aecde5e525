//! Human-readable summaries: a metrics table and SVG line plots.

use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::trainer::{EpochStats, StepStats};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{0} is empty")]
    Empty(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One results row: accuracies in percent, mean epoch time in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub epochs: usize,
    pub top1: f64,
    pub top3: f64,
    pub epoch_time_s: f64,
}

pub fn write_metrics_csv<W: Write>(w: W, rows: &[MetricsRow]) -> Result<(), ReportError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_step_stats<R: Read>(r: R, name: &str) -> Result<Vec<StepStats>, ReportError> {
    read_rows(r, name)
}

pub fn read_epoch_stats<R: Read>(r: R, name: &str) -> Result<Vec<EpochStats>, ReportError> {
    read_rows(r, name)
}

fn read_rows<R: Read, T: serde::de::DeserializeOwned>(r: R, name: &str) -> Result<Vec<T>, ReportError> {
    let rows = csv::Reader::from_reader(r)
        .deserialize()
        .collect::<Result<Vec<T>, _>>()?;
    if rows.is_empty() {
        return Err(ReportError::Empty(name.to_string()));
    }
    Ok(rows)
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 60.0;

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// A single-series line plot with min/max axis labels.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> Result<String, ReportError> {
    if points.is_empty() {
        return Err(ReportError::Empty(format!("series for {title}")));
    }
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        let lo = points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) }
    };
    let (x0, x1) = bounds(|p| p.0);
    let (y0, y1) = bounds(|p| p.1);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="30" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#, W / 2.0, escape(title));
    let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    let _ = writeln!(svg, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#);
    let path: Vec<String> = points
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| format!("{}{:.2} {:.2}", if i == 0 { 'M' } else { 'L' }, sx(x), sy(y)))
        .collect();
    let _ = writeln!(svg, r#"<path d="{}" stroke="steelblue" stroke-width="1.5" fill="none"/>"#, path.join(" "));
    let text = |svg: &mut String, x: f64, y: f64, anchor: &str, s: &str| {
        let _ = writeln!(svg, r#"<text x="{x}" y="{y}" text-anchor="{anchor}" font-family="sans-serif" font-size="11">{}</text>"#, escape(s));
    };
    text(&mut svg, l, b + 16.0, "middle", &tick(x0));
    text(&mut svg, r, b + 16.0, "middle", &tick(x1));
    text(&mut svg, l - 6.0, b, "end", &tick(y0));
    text(&mut svg, l - 6.0, t + 4.0, "end", &tick(y1));
    text(&mut svg, W / 2.0, H - 15.0, "middle", x_label);
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
