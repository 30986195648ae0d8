//! Confusion counts, accuracy, per-epoch history and its CSV/JSON export.
//!
//! The positive class is "fake" (label 1).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::Split;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn correct(&self) -> u64 {
        self.tp + self.tn
    }
}

/// Tallies predictions against labels (both in `{0, 1}`).
pub fn confusion(predictions: &[usize], labels: &[usize]) -> Result<ConfusionCounts> {
    if predictions.len() != labels.len() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    if predictions.is_empty() {
        return Err(Error::Data("confusion of zero samples".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => return Err(Error::Data(format!("prediction {p} / label {l} outside {{0, 1}}"))),
        }
    }
    Ok(c)
}

/// `(TP + TN) / (TP + TN + FP + FN)`.
pub fn accuracy(c: &ConfusionCounts) -> Result<f64> {
    if c.total() == 0 {
        return Err(Error::Data("accuracy of zero samples".into()));
    }
    Ok(c.correct() as f64 / c.total() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub mean_loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsHistory {
    pub run_id: String,
    pub config_hash: String,
    pub rows: Vec<MetricsRow>,
}

/// Best accuracy of a split and the (earliest) epoch reaching it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Best {
    pub epoch: usize,
    pub accuracy: f64,
}

impl MetricsHistory {
    pub fn new(run_id: &str, config_hash: &str) -> Self {
        MetricsHistory {
            run_id: run_id.to_string(),
            config_hash: config_hash.to_string(),
            rows: Vec::new(),
        }
    }

    /// Appends a row; epochs must increase strictly within a split.
    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(last) = self.rows.iter().rev().find(|r| r.split == row.split) {
            if row.epoch <= last.epoch {
                return Err(Error::Data(format!(
                    "{} epoch {} does not follow epoch {}",
                    row.split.name(),
                    row.epoch,
                    last.epoch
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    /// Per-split maximum accuracy; ties resolve to the earliest epoch.
    pub fn best(&self, split: Split) -> Result<Best> {
        let mut rows: Vec<&MetricsRow> = self.rows.iter().filter(|r| r.split == split).collect();
        rows.sort_by_key(|r| r.epoch);
        let mut best: Option<Best> = None;
        for r in rows {
            if best.is_none_or(|b| r.accuracy > b.accuracy) {
                best = Some(Best {
                    epoch: r.epoch,
                    accuracy: r.accuracy,
                });
            }
        }
        best.ok_or_else(|| Error::Data(format!("history has no {} rows", split.name())))
    }
}

/// `(best train, best test)`, each taken independently over epochs.
pub fn best_of(history: &MetricsHistory) -> (Result<Best>, Result<Best>) {
    (history.best(Split::Train), history.best(Split::Test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistorySummary {
    pub run_id: String,
    pub config_hash: String,
    pub positive_class: String,
    pub best_train: Option<Best>,
    pub best_test: Option<Best>,
    pub note: String,
}

pub const HISTORY_CSV: &str = "metrics.csv";
pub const SUMMARY_JSON: &str = "metrics_summary.json";

/// Writes `metrics.csv` (`epoch,split,mean_loss,accuracy`) and
/// `metrics_summary.json` into `dir`; returns both paths.
pub fn export_history(history: &MetricsHistory, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(HISTORY_CSV);
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["epoch", "split", "mean_loss", "accuracy"])?;
    for r in &history.rows {
        w.write_record([r.epoch.to_string(), r.split.name().to_string(), format!("{}", r.mean_loss), format!("{}", r.accuracy)])?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let (train, test) = best_of(history);
    let summary = HistorySummary {
        run_id: history.run_id.clone(),
        config_hash: history.config_hash.clone(),
        positive_class: "fake (label 1)".into(),
        best_train: train.ok(),
        best_test: test.ok(),
        note: "best train and best test accuracies are per-split maxima and may come from different epochs".into(),
    };
    let json_path = dir.join(SUMMARY_JSON);
    std::fs::write(&json_path, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok((csv_path, json_path))
}

/// Reads rows back from an exported CSV.
pub fn import_history_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::Data(format!("{}: short CSV row", path.display())));
        let num = |i: usize| -> Result<f64> {
            field(i)?.parse().map_err(|e| Error::Data(format!("{}: {e}", path.display())))
        };
        rows.push(MetricsRow {
            epoch: field(0)?.parse().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?,
            split: field(1)?.parse()?,
            mean_loss: num(2)?,
            accuracy: num(3)?,
        });
    }
    Ok(rows)
}
