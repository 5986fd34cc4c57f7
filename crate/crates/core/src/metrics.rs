//! AUROC, accuracy, and multi-seed aggregation.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("AUROC undefined: labels contain only one class")]
    SingleClass,
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("no records to evaluate")]
    Empty,
    #[error("score at index {0} is NaN")]
    NanScore(usize),
}

/// Probability that a random hateful record outscores a random non-hateful
/// one, ties counting one half. Computed from midranks (Mann-Whitney U).
pub fn auroc(scores: &[f64], labels: &[Label]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(MetricsError::NanScore(i));
    }
    let n_pos = labels.iter().filter(|&&l| l == Label::Hateful).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // sum of midranks over positives; ranks are 1-based
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        let pos_in_run = order[i..j]
            .iter()
            .filter(|&&k| labels[k] == Label::Hateful)
            .count();
        pos_rank_sum += midrank * pos_in_run as f64;
        i = j;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

pub fn accuracy(preds: &[Label], labels: &[Label]) -> Result<f64, MetricsError> {
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(preds.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auroc: f64,
    pub accuracy: f64,
    pub n: usize,
    pub seed: u64,
}

pub fn evaluate(
    hateful_scores: &[f64],
    preds: &[Label],
    labels: &[Label],
    seed: u64,
) -> Result<EvalResult, MetricsError> {
    Ok(EvalResult {
        auroc: auroc(hateful_scores, labels)?,
        accuracy: accuracy(preds, labels)?,
        n: labels.len(),
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub per_seed: Vec<EvalResult>,
    pub mean_auroc: f64,
    pub std_auroc: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
    /// Always "population".
    pub std_kind: String,
    /// Set when only one seed contributed, so the deviations are 0 by convention.
    pub single_seed: bool,
    pub config_hash: String,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and population standard deviation per metric. `None` when empty.
pub fn aggregate_seeds(results: &[EvalResult]) -> Option<RunResult> {
    if results.is_empty() {
        return None;
    }
    let aucs: Vec<f64> = results.iter().map(|r| r.auroc).collect();
    let accs: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    let (mean_auroc, std_auroc) = mean_std(&aucs);
    let (mean_acc, std_acc) = mean_std(&accs);
    Some(RunResult {
        per_seed: results.to_vec(),
        mean_auroc,
        std_auroc,
        mean_acc,
        std_acc,
        std_kind: "population".into(),
        single_seed: results.len() == 1,
        config_hash: String::new(),
    })
}

/// `mean±std` in percentage points with two decimals, e.g. `82.27±0.53`.
pub fn format_pm(mean: f64, std: f64) -> String {
    format!("{:.2}±{:.2}", 100.0 * mean, 100.0 * std)
}

/// One labelled run for the results table.
#[derive(Debug, Clone)]
pub struct TableRow<'a> {
    pub model: &'a str,
    pub dataset: &'a str,
    pub setting: &'a str,
    pub result: &'a RunResult,
}

/// Writes per-seed rows then an aggregate row per run.
///
/// Columns: model, dataset, setting, seed, auroc, acc. Values are percentages;
/// aggregate rows use seed `mean±std(pop)` and `mean±std` cells.
pub fn write_results_csv<W: Write>(out: W, rows: &[TableRow<'_>]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "dataset", "setting", "seed", "auroc", "acc"])?;
    for row in rows {
        for r in &row.result.per_seed {
            w.write_record([
                row.model,
                row.dataset,
                row.setting,
                &r.seed.to_string(),
                &format!("{:.4}", 100.0 * r.auroc),
                &format!("{:.4}", 100.0 * r.accuracy),
            ])?;
        }
        let seed_label = if row.result.single_seed {
            "mean±std(pop,single-seed)"
        } else {
            "mean±std(pop)"
        };
        w.write_record([
            row.model,
            row.dataset,
            row.setting,
            seed_label,
            &format_pm(row.result.mean_auroc, row.result.std_auroc),
            &format_pm(row.result.mean_acc, row.result.std_acc),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_results_csv_file(path: impl AsRef<Path>, rows: &[TableRow<'_>]) -> csv::Result<()> {
    let file = std::fs::File::create(path)?;
    write_results_csv(std::io::BufWriter::new(file), rows)
}
