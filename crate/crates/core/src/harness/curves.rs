//! Accuracy-versus-epoch plots from loss traces.
//!
//! Output is a hand-written SVG (validation solid, test dashed, one colour
//! per mode) plus a JSON summary. Both are pure functions of the traces, so
//! re-running on the same files reproduces them byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{McdError, Result};
use crate::json::write_json_pretty;
use crate::trainer::LossTrace;

pub const CURVES_SVG: &str = "curves.svg";
pub const CURVES_SUMMARY: &str = "curves_summary.json";

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];
const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 48.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub mode: String,
    pub source: String,
    pub epochs: usize,
    pub best_val_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub final_val_accuracy: Option<f64>,
    pub final_test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvesSummary {
    pub modes: Vec<CurveSummary>,
    pub plot: String,
}

pub fn summarize(trace: &LossTrace, source: String) -> CurveSummary {
    let best = trace.best_val_epoch();
    let last = trace.epochs.last();
    CurveSummary {
        mode: trace.mode.clone(),
        source,
        epochs: trace.epochs.len(),
        best_val_epoch: best.map(|e| e.epoch),
        best_val_accuracy: best.and_then(|e| e.val_accuracy),
        final_val_accuracy: last.and_then(|e| e.val_accuracy),
        final_test_accuracy: last.and_then(|e| e.test_accuracy),
    }
}

fn polyline(out: &mut String, points: &[(usize, f64)], max_epoch: usize, colour: &str, dashed: bool) {
    if points.is_empty() {
        return;
    }
    let x = |e: usize| MARGIN + (WIDTH - 2.0 * MARGIN) * e as f64 / max_epoch.max(1) as f64;
    let y = |a: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * a.clamp(0.0, 1.0);
    let coords: Vec<String> = points.iter().map(|&(e, a)| format!("{:.2},{:.2}", x(e), y(a))).collect();
    let dash = if dashed { " stroke-dasharray=\"6 4\"" } else { "" };
    let _ = writeln!(
        out,
        "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\"{dash} points=\"{}\"/>",
        coords.join(" ")
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render_svg(traces: &[LossTrace]) -> String {
    let max_epoch = traces
        .iter()
        .flat_map(|t| t.epochs.iter().map(|e| e.epoch))
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" font-family=\"sans-serif\" font-size=\"11\">"
    );
    let _ = writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    for i in 0..=4 {
        let a = i as f64 / 4.0;
        let y = bottom - (bottom - top) * a;
        let _ = writeln!(
            out,
            "<line x1=\"{left}\" y1=\"{y:.2}\" x2=\"{right}\" y2=\"{y:.2}\" stroke=\"#ddd\"/><text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{a:.2}</text>",
            left - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{left}\" y=\"{:.2}\">0</text><text x=\"{right}\" y=\"{:.2}\" text-anchor=\"end\">epoch {max_epoch}</text>",
        bottom + 16.0,
        bottom + 16.0
    );
    for (i, t) in traces.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let val: Vec<_> = t.epochs.iter().filter_map(|e| e.val_accuracy.map(|a| (e.epoch, a))).collect();
        let test: Vec<_> = t.epochs.iter().filter_map(|e| e.test_accuracy.map(|a| (e.epoch, a))).collect();
        polyline(&mut out, &val, max_epoch, colour, false);
        polyline(&mut out, &test, max_epoch, colour, true);
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" fill=\"{colour}\">{} (val solid, test dashed)</text>",
            left + 8.0,
            top + 14.0 * (i as f64 + 1.0),
            escape(&t.mode)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Loads every trace, then writes the plot and summary under `out_dir`.
pub fn emit_curves(traces: &[PathBuf], out_dir: &Path) -> Result<CurvesSummary> {
    if traces.is_empty() {
        return Err(McdError::Config("plot needs at least one trace".into()));
    }
    let loaded = traces.iter().map(|p| LossTrace::load(p)).collect::<Result<Vec<_>>>()?;
    let modes = loaded
        .iter()
        .zip(traces)
        .map(|(t, p)| summarize(t, p.display().to_string()))
        .collect();
    fs::create_dir_all(out_dir).map_err(|e| McdError::io(out_dir, e))?;
    let svg = out_dir.join(CURVES_SVG);
    fs::write(&svg, render_svg(&loaded)).map_err(|e| McdError::io(&svg, e))?;
    let summary = CurvesSummary {
        modes,
        plot: CURVES_SVG.to_string(),
    };
    write_json_pretty(&out_dir.join(CURVES_SUMMARY), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{EpochRecord, LossBreakdown};

    fn trace(mode: &str, val: &[f64], test: &[f64]) -> LossTrace {
        LossTrace {
            mode: mode.into(),
            config_fingerprint: "f".into(),
            steps: vec![],
            epochs: val
                .iter()
                .zip(test)
                .enumerate()
                .map(|(epoch, (&v, &t))| EpochRecord {
                    epoch,
                    lr: 1e-3,
                    loss: LossBreakdown::new(1.0, 0.0, 0.0, 0.0, 0.1),
                    val_accuracy: Some(v),
                    test_accuracy: Some(t),
                })
                .collect(),
        }
    }

    #[test]
    fn one_trace_gives_one_curve_pair_and_a_stable_summary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.json");
        crate::json::write_json_pretty(&path, &trace("default", &[0.5, 0.9, 0.8], &[0.4, 0.85, 0.88])).unwrap();
        let out = dir.path().join("plots");
        let s = emit_curves(std::slice::from_ref(&path), &out).unwrap();
        let svg = fs::read_to_string(out.join(CURVES_SVG)).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(s.modes[0].best_val_epoch, Some(1));
        assert_eq!(s.modes[0].final_test_accuracy, Some(0.88));
        let first = fs::read(out.join(CURVES_SUMMARY)).unwrap();
        emit_curves(&[path], &out).unwrap();
        assert_eq!(fs::read(out.join(CURVES_SUMMARY)).unwrap(), first);
        assert_eq!(fs::read_to_string(out.join(CURVES_SVG)).unwrap(), svg);
    }

    #[test]
    fn malformed_trace_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.json");
        fs::write(&path, "{\"mode\": 3}").unwrap();
        let err = emit_curves(&[path], dir.path()).unwrap_err();
        assert!(err.to_string().contains("broken.json"), "{err}");
    }
}
