//! Multi-run summary statistics over per-epoch CSV metrics.

use crate::run::EpochRow;
use kronwake::error::{Error, Result};
use std::fmt;
use std::path::Path;

/// Reference results reported for the original experiment (10 runs, 50
/// epochs, conv net): (solver, mean acc %, sd acc %, mean loss, sd loss).
/// Rendered for context next to local summaries, never asserted against.
pub const REFERENCE_SUMMARY: [(&str, f64, f64, f64, f64); 4] = [
    ("kfac", 96.19, 3.2, 0.26, 0.1),
    ("so", 97.60, 0.85, 0.25, 0.04),
    ("q", 97.69, 0.69, 0.26, 0.04),
    ("qe", 97.73, 0.63, 0.24, 0.03),
];

pub fn parse_csv(path: &Path) -> Result<Vec<EpochRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(Error::Format(format!("{}: line {} has {} fields", path.display(), i + 1, parts.len())));
        }
        let f = |j: usize| -> Result<f64> {
            parts[j].parse().map_err(|_| Error::Format(format!("bad float '{}'", parts[j])))
        };
        rows.push(EpochRow {
            epoch: parts[0].parse().map_err(|_| Error::Format("bad epoch".into()))?,
            train_loss: f(1)?,
            test_loss: f(2)?,
            test_acc: f(3)?,
            wall_s: f(4)?,
            step_norm: f(5)?,
            margin: None,
        });
    }
    if rows.is_empty() {
        return Err(Error::Format(format!("{}: no data rows", path.display())));
    }
    Ok(rows)
}

/// Final-epoch moments plus best-epoch threshold counts across runs.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryTable {
    pub n_runs: usize,
    pub epochs: usize,
    pub mu_acc: f64,
    pub sigma_acc: f64,
    pub mu_loss: f64,
    pub sigma_loss: f64,
    /// Sample SD is undefined for one run; σ fields are 0 and this is set.
    pub single_run: bool,
    pub n_acc_ge_98: usize,
    pub n_acc_gt_98: usize,
    pub n_acc_ge_985: usize,
    pub n_loss_le_025: usize,
    pub n_loss_le_02: usize,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Thresholds count a run if its best epoch crossed them, even when the
/// metric degrades afterwards; means and SDs are final-epoch.
pub fn summarize(runs: &[Vec<EpochRow>]) -> Result<SummaryTable> {
    if runs.is_empty() {
        return Err(Error::Config("summarize: no runs".into()));
    }
    let epochs = runs[0].len();
    if runs.iter().any(|r| r.len() != epochs) {
        return Err(Error::Dimension("summarize: runs have different epoch counts".into()));
    }
    let final_acc: Vec<f64> = runs.iter().map(|r| r.last().unwrap().test_acc).collect();
    let final_loss: Vec<f64> = runs.iter().map(|r| r.last().unwrap().test_loss).collect();
    let best_acc: Vec<f64> =
        runs.iter().map(|r| r.iter().map(|e| e.test_acc).fold(f64::NEG_INFINITY, f64::max)).collect();
    let best_loss: Vec<f64> =
        runs.iter().map(|r| r.iter().map(|e| e.test_loss).fold(f64::INFINITY, f64::min)).collect();

    let (mu_acc, sigma_acc) = mean_sd(&final_acc);
    let (mu_loss, sigma_loss) = mean_sd(&final_loss);
    Ok(SummaryTable {
        n_runs: runs.len(),
        epochs,
        mu_acc,
        sigma_acc,
        mu_loss,
        sigma_loss,
        single_run: runs.len() == 1,
        n_acc_ge_98: best_acc.iter().filter(|&&a| a >= 0.98).count(),
        n_acc_gt_98: best_acc.iter().filter(|&&a| a > 0.98).count(),
        n_acc_ge_985: best_acc.iter().filter(|&&a| a >= 0.985).count(),
        n_loss_le_025: best_loss.iter().filter(|&&l| l <= 0.25).count(),
        n_loss_le_02: best_loss.iter().filter(|&&l| l <= 0.2).count(),
    })
}

impl fmt::Display for SummaryTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "runs: {} ({} epochs each)", self.n_runs, self.epochs)?;
        writeln!(
            f,
            "final epoch: acc {:.4} ± {:.4}{}  loss {:.4} ± {:.4}",
            self.mu_acc,
            self.sigma_acc,
            if self.single_run { " (single run, SD undefined)" } else { "" },
            self.mu_loss,
            self.sigma_loss
        )?;
        writeln!(
            f,
            "best-epoch counts: acc≥98%: {}  acc>98%: {}  acc≥98.5%: {}  loss≤0.25: {}  loss≤0.2: {}",
            self.n_acc_ge_98, self.n_acc_gt_98, self.n_acc_ge_985, self.n_loss_le_025, self.n_loss_le_02
        )
    }
}

pub fn reference_block() -> String {
    let mut out = String::from("reference (reported, 10 runs × 50 epochs, conv net):\n");
    for (name, mu_a, sd_a, mu_l, sd_l) in REFERENCE_SUMMARY {
        out.push_str(&format!("  {name:<5} acc {mu_a:.2}% ± {sd_a}%  loss {mu_l} ± {sd_l}\n"));
    }
    out
}
