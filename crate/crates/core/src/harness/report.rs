use serde::{Deserialize, Serialize};

use super::config::Variant;
use super::train::RunResult;

/// Seed-averaged summary for one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: Variant,
    pub runs: usize,
    pub task_score: f64,
    pub energy: f64,
    /// Mean over runs where the metric was defined.
    pub cos_adj: Option<f64>,
    pub extra_cost_pct: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Groups results by variant in a fixed order. Seeds are visited sorted so
/// the summary does not depend on input order.
pub fn summarize(results: &[RunResult]) -> Vec<ReportRow> {
    Variant::ALL
        .iter()
        .filter_map(|&variant| {
            let mut runs: Vec<&RunResult> = results
                .iter()
                .filter(|r| r.config.variant == variant)
                .collect();
            if runs.is_empty() {
                return None;
            }
            runs.sort_by_key(|r| r.config.seed);
            Some(ReportRow {
                variant,
                runs: runs.len(),
                task_score: mean(runs.iter().map(|r| r.final_task_score))?,
                energy: mean(runs.iter().map(|r| r.final_energy))?,
                cos_adj: mean(runs.iter().filter_map(|r| r.final_cos_adj)),
                extra_cost_pct: mean(runs.iter().map(|r| r.overhead.extra_cost_pct))?,
            })
        })
        .collect()
}

/// Plain-text table of [`summarize`].
pub fn render_report(results: &[RunResult]) -> String {
    let mut out = format!(
        "{:<12} {:>5} {:>12} {:>14} {:>10} {:>12}\n",
        "variant", "runs", "task_score", "energy", "cos_adj", "extra_cost%"
    );
    for row in summarize(results) {
        let cos = row
            .cos_adj
            .map_or_else(|| "n/a".to_string(), |c| format!("{c:.4}"));
        out.push_str(&format!(
            "{:<12} {:>5} {:>12.4} {:>14.6e} {:>10} {:>12.2}\n",
            row.variant.as_str(),
            row.runs,
            row.task_score,
            row.energy,
            cos,
            row.extra_cost_pct
        ));
    }
    out
}
