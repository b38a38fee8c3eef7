//! Static SVG learning-curve charts: three stacked panels (test accuracy,
//! test loss, train loss), one polyline per run per panel, deterministic
//! bytes.

use crate::run::EpochRow;
use kronwake::error::{Error, Result};
use std::path::Path;

const PANEL_W: f64 = 640.0;
const PANEL_H: f64 = 200.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_T: f64 = 30.0;
const GAP: f64 = 40.0;

const PALETTE: [&str; 8] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

struct Panel {
    title: &'static str,
    min_y: f64,
    max_y: f64,
}

fn metric(row: &EpochRow, panel: usize) -> f64 {
    match panel {
        0 => row.test_acc,
        1 => row.test_loss,
        _ => row.train_loss,
    }
}

/// Render learning curves for a set of runs into a standalone SVG file.
pub fn render_curves(runs: &[Vec<EpochRow>], out: &Path) -> Result<()> {
    if runs.is_empty() || runs.iter().any(|r| r.is_empty()) {
        return Err(Error::Config("render_curves: no runs or empty run".into()));
    }
    let max_epoch = runs.iter().map(|r| r.last().unwrap().epoch).max().unwrap() as f64;
    let min_epoch = runs.iter().map(|r| r[0].epoch).min().unwrap() as f64;
    let x_span = (max_epoch - min_epoch).max(1.0);

    let mut panels = Vec::new();
    for (p, title) in ["test accuracy", "test loss", "train loss"].into_iter().enumerate() {
        let mut min_y = f64::INFINITY;
        let mut max_y = f64::NEG_INFINITY;
        for r in runs {
            for row in r {
                min_y = min_y.min(metric(row, p));
                max_y = max_y.max(metric(row, p));
            }
        }
        if !min_y.is_finite() || !max_y.is_finite() {
            return Err(Error::Numeric("render_curves: non-finite metric".into()));
        }
        if max_y - min_y < 1e-12 {
            max_y = min_y + 1.0;
        }
        panels.push(Panel { title, min_y, max_y });
    }

    let total_h = MARGIN_T + 3.0 * PANEL_H + 2.0 * GAP + 40.0;
    let total_w = MARGIN_L + PANEL_W + 30.0;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total_w:.0}\" height=\"{total_h:.0}\" viewBox=\"0 0 {total_w:.0} {total_h:.0}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    for (p, panel) in panels.iter().enumerate() {
        let top = MARGIN_T + p as f64 * (PANEL_H + GAP);
        let bottom = top + PANEL_H;
        svg.push_str(&format!(
            "<text x=\"{MARGIN_L:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"13\">{}</text>\n",
            top - 8.0,
            panel.title
        ));
        svg.push_str(&format!(
            "<rect x=\"{MARGIN_L:.1}\" y=\"{top:.1}\" width=\"{PANEL_W:.1}\" height=\"{PANEL_H:.1}\" fill=\"none\" stroke=\"#333\" stroke-width=\"1\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"end\">{:.4}</text>\n",
            MARGIN_L - 4.0,
            top + 10.0,
            panel.max_y
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"end\">{:.4}</text>\n",
            MARGIN_L - 4.0,
            bottom,
            panel.min_y
        ));

        for (run_idx, r) in runs.iter().enumerate() {
            let color = PALETTE[run_idx % PALETTE.len()];
            let mut points = String::new();
            for row in r {
                let x = MARGIN_L + (row.epoch as f64 - min_epoch) / x_span * PANEL_W;
                let y_frac = (metric(row, p) - panel.min_y) / (panel.max_y - panel.min_y);
                let y = bottom - y_frac * PANEL_H;
                points.push_str(&format!("{x:.4},{y:.4} "));
            }
            // a single epoch degenerates to a repeated two-point polyline
            if r.len() == 1 {
                points.push_str(points.clone().trim_end());
            }
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                points.trim_end()
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"10\">epoch {min_epoch:.0}..{max_epoch:.0}</text>\n",
            MARGIN_L,
            bottom + 14.0
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(out, svg)?;
    Ok(())
}
