//! Static SVG reports: training curves and prediction-vs-gold scatter.
//!
//! Each panel's axis group carries its numeric range as `data-min` /
//! `data-max` attributes so the markup can be checked without rendering.

use std::fmt::Write as _;

use thiserror::Error;

use crate::postproc::UtterancePrediction;
use crate::trainer::TrainLog;

const WIDTH: f64 = 640.0;
const PANEL_HEIGHT: f64 = 300.0;
const MARGIN: f64 = 50.0;
const TICKS: usize = 5;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#7f7f7f"];

#[derive(Debug, Error, PartialEq)]
pub enum PlotError {
    #[error("log has no step or epoch records")]
    EmptyLog,
    #[error("no predictions match the gold ids")]
    NoOverlap,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mark {
    Line,
    Dots,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub mark: Mark,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

/// Closed interval covering `values`, padded by 5% of its width; a point
/// range widens to ±0.5.
pub fn extent(values: impl IntoIterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .into_iter()
        .filter(|v| v.is_finite())
        .fold(None, |acc: Option<(f64, f64)>, v| {
            Some(acc.map_or((v, v), |(lo, hi)| (lo.min(v), hi.max(v))))
        })?;
    if hi - lo < 1e-12 {
        return Some((lo - 0.5, hi + 0.5));
    }
    let pad = 0.05 * (hi - lo);
    Some((lo - pad, hi + pad))
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn render_panel(out: &mut String, panel: &Panel, top: f64) {
    let all = || panel.series.iter().flat_map(|s| s.points.iter());
    let (x0, x1) = extent(all().map(|p| p.0)).unwrap_or((0.0, 1.0));
    let (y0, y1) = extent(all().map(|p| p.1)).unwrap_or((0.0, 1.0));
    let (left, right) = (MARGIN, WIDTH - MARGIN / 2.0);
    let (upper, lower) = (top + MARGIN / 1.5, top + PANEL_HEIGHT - MARGIN);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * (right - left);
    let sy = |y: f64| lower - (y - y0) / (y1 - y0) * (lower - upper);

    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        top + 20.0,
        esc(&panel.title)
    );
    let _ = writeln!(
        out,
        r#"<g class="axis" data-axis="x" data-min="{x0}" data-max="{x1}" font-size="10">"#
    );
    let _ = writeln!(out, r#"<line x1="{left:.2}" y1="{lower:.2}" x2="{right:.2}" y2="{lower:.2}" stroke="black"/>"#);
    for i in 0..TICKS {
        let v = x0 + (x1 - x0) * i as f64 / (TICKS - 1) as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{v:.3}</text>"#,
            sx(v),
            lower + 14.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        (left + right) / 2.0,
        lower + 30.0,
        esc(&panel.x_label)
    );
    out.push_str("</g>\n");
    let _ = writeln!(
        out,
        r#"<g class="axis" data-axis="y" data-min="{y0}" data-max="{y1}" font-size="10">"#
    );
    let _ = writeln!(out, r#"<line x1="{left:.2}" y1="{upper:.2}" x2="{left:.2}" y2="{lower:.2}" stroke="black"/>"#);
    for i in 0..TICKS {
        let v = y0 + (y1 - y0) * i as f64 / (TICKS - 1) as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"#,
            left - 4.0,
            sy(v) + 3.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="12" y="{:.2}" transform="rotate(-90 12 {:.2})" text-anchor="middle">{}</text>"#,
        (upper + lower) / 2.0,
        (upper + lower) / 2.0,
        esc(&panel.y_label)
    );
    out.push_str("</g>\n");

    for (k, s) in panel.series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let _ = writeln!(out, r#"<g class="series" data-name="{}">"#, esc(&s.name));
        match s.mark {
            Mark::Line => {
                let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                let _ = writeln!(
                    out,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    pts.join(" ")
                );
            }
            Mark::Dots => {
                for &(x, y) in &s.points {
                    let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, sx(x), sy(y));
                }
            }
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" fill="{color}">{}</text>"#,
            right - 110.0,
            upper + 12.0 * k as f64,
            esc(&s.name)
        );
        out.push_str("</g>\n");
    }
}

/// Stack panels vertically into one SVG document.
pub fn render_svg(panels: &[Panel]) -> String {
    let height = PANEL_HEIGHT * panels.len().max(1) as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, p) in panels.iter().enumerate() {
        render_panel(&mut out, p, PANEL_HEIGHT * i as f64);
    }
    out.push_str("</svg>\n");
    out
}

/// Loss and CCC curves from `log`, plus a scatter panel when predictions and
/// gold labels are given.
pub fn training_report(
    log: &TrainLog,
    scatter: Option<(&[UtterancePrediction], &[UtterancePrediction])>,
) -> Result<String, PlotError> {
    if log.entries.is_empty() {
        return Err(PlotError::EmptyLog);
    }
    let mut panels = Vec::new();
    let loss: Vec<(f64, f64)> = log.steps().map(|(s, l)| (s as f64, l)).collect();
    if !loss.is_empty() {
        panels.push(Panel {
            title: "training loss".into(),
            x_label: "step".into(),
            y_label: "loss".into(),
            series: vec![Series {
                name: "loss".into(),
                points: loss,
                mark: Mark::Line,
            }],
        });
    }
    let epochs: Vec<(usize, f64, f64)> = log.epochs().collect();
    if !epochs.is_empty() {
        let line = |name: &str, pick: fn(&(usize, f64, f64)) -> f64| Series {
            name: name.into(),
            points: epochs.iter().map(|e| (e.0 as f64, pick(e))).collect(),
            mark: Mark::Line,
        };
        panels.push(Panel {
            title: "evaluation CCC".into(),
            x_label: "epoch".into(),
            y_label: "CCC".into(),
            series: vec![line("valence", |e| e.1), line("arousal", |e| e.2)],
        });
    }
    if let Some((preds, gold)) = scatter {
        let pairs: Vec<(&UtterancePrediction, &UtterancePrediction)> = gold
            .iter()
            .filter_map(|g| preds.iter().find(|p| p.id == g.id).map(|p| (p, g)))
            .collect();
        if pairs.is_empty() {
            return Err(PlotError::NoOverlap);
        }
        let dots = |name: &str, dim: usize| Series {
            name: name.into(),
            points: pairs.iter().map(|(p, g)| (g.get(dim), p.get(dim))).collect(),
            mark: Mark::Dots,
        };
        panels.push(Panel {
            title: "prediction vs gold".into(),
            x_label: "gold".into(),
            y_label: "prediction".into(),
            series: vec![dots("valence", 0), dots("arousal", 1)],
        });
    }
    Ok(render_svg(&panels))
}
