//! Per-epoch metrics and their CSV encoding.
//!
//! Floats are written in Rust's shortest round-trip form (`{:?}`), so a file
//! re-parses to the exact values that produced it and identical runs give
//! identical bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_COLUMNS: [&str; 13] = [
    "epoch",
    "train_loss",
    "train_acc",
    "test_acc",
    "clean_subset_acc",
    "noisy_subset_acc",
    "schedule_scale",
    "mean_perturbation_norm",
    "mean_correction_norm",
    "mean_cos_theta",
    "kl_diag",
    "pac_penalty",
    "wall_seconds",
];

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean over batches of the loss at the unperturbed weights, observed labels.
    pub train_loss: f64,
    /// Accuracy against the observed training labels.
    pub train_acc: f64,
    pub test_acc: f64,
    /// Accuracy on uncorrupted training samples.
    pub clean_subset_acc: f64,
    /// Accuracy against the original (true) labels on corrupted training
    /// samples. Falls as the model memorizes the noise.
    pub noisy_subset_acc: f64,
    pub schedule_scale: f64,
    pub mean_perturbation_norm: f64,
    pub mean_correction_norm: f64,
    pub mean_cos_theta: f64,
    pub kl_diag: f64,
    pub pac_penalty: f64,
    pub wall_seconds: f64,
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let values = [
            self.train_loss,
            self.train_acc,
            self.test_acc,
            self.clean_subset_acc,
            self.noisy_subset_acc,
            self.schedule_scale,
            self.mean_perturbation_norm,
            self.mean_correction_norm,
            self.mean_cos_theta,
            self.kl_diag,
            self.pac_penalty,
            self.wall_seconds,
        ];
        let mut row = self.epoch.to_string();
        for v in values {
            row.push(',');
            row.push_str(&fmt(v));
        }
        row
    }

    fn from_fields(fields: &[&str]) -> std::result::Result<Self, String> {
        if fields.len() != METRICS_COLUMNS.len() {
            return Err(format!(
                "expected {} fields, found {}",
                METRICS_COLUMNS.len(),
                fields.len()
            ));
        }
        let f = |i: usize| {
            fields[i]
                .parse::<f64>()
                .map_err(|e| format!("column {}: {e}", METRICS_COLUMNS[i]))
        };
        Ok(Self {
            epoch: fields[0].parse().map_err(|e| format!("column epoch: {e}"))?,
            train_loss: f(1)?,
            train_acc: f(2)?,
            test_acc: f(3)?,
            clean_subset_acc: f(4)?,
            noisy_subset_acc: f(5)?,
            schedule_scale: f(6)?,
            mean_perturbation_norm: f(7)?,
            mean_correction_norm: f(8)?,
            mean_cos_theta: f(9)?,
            kl_diag: f(10)?,
            pac_penalty: f(11)?,
            wall_seconds: f(12)?,
        })
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = METRICS_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn parse_metrics(text: &str) -> std::result::Result<Vec<EpochMetrics>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty file")?;
    if header != METRICS_COLUMNS.join(",") {
        return Err(format!("unexpected header {header:?}"));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let row = EpochMetrics::from_fields(&fields).map_err(|e| format!("line {}: {e}", i + 2))?;
        if rows.last().is_some_and(|prev: &EpochMetrics| prev.epoch >= row.epoch) {
            return Err(format!("line {}: epochs not strictly increasing", i + 2));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text).map_err(|reason| Error::Csv {
        path: path.to_path_buf(),
        reason,
    })
}

/// Mean test accuracy over the last five epochs (fewer if the run is shorter).
pub fn final_window_accuracy(rows: &[EpochMetrics]) -> f64 {
    let window = &rows[rows.len().saturating_sub(5)..];
    if window.is_empty() {
        return f64::NAN;
    }
    window.iter().map(|r| r.test_acc).sum::<f64>() / window.len() as f64
}
