//! Per-round metrics records and per-run summaries.

use std::io::Write;
use std::path::Path;

use edit_sim::protocol::{RoundReport, SyncSummary};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Number of trailing records averaged into the final-loss figures.
pub const FINAL_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    /// Outer round; the closing record of a run has `t = rounds`.
    pub t: u64,
    /// Cumulative inner steps of column 0.
    pub p: u64,
    /// Inner steps taken this round, per column.
    pub steps: Vec<u64>,
    pub train_loss: Option<f64>,
    pub nonfinite_workers: Vec<usize>,
    /// Validation loss on the synchronized anchors.
    pub val_loss: Option<f64>,
    pub grad_norm_mean: Option<f64>,
    pub grad_norm_max: Option<f64>,
    pub synced: bool,
    pub anomalies: usize,
    pub rollbacks: usize,
    pub rollback: bool,
    pub beta_min: Option<f64>,
    pub beta_mean: Option<f64>,
    pub samples_per_sec: Option<f64>,
    pub wait_fraction: Option<f64>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl MetricsRecord {
    pub fn from_round(run_id: &str, seed: u64, p: u64, r: &RoundReport) -> Self {
        let mut rec = Self::closing(run_id, seed, r.t, p, r.sync.as_ref(), r.val_loss);
        rec.steps = r.steps.clone();
        rec.train_loss = finite(r.train_loss);
        rec.nonfinite_workers = r.nonfinite_workers.clone();
        rec.grad_norm_mean = finite(r.grad_norm_mean);
        rec.grad_norm_max = finite(r.grad_norm_max);
        rec
    }

    /// Record for the final sync issued after the last round.
    pub fn closing(run_id: &str, seed: u64, t: u64, p: u64, sync: Option<&SyncSummary>, val_loss: f64) -> Self {
        Self {
            run_id: run_id.to_string(),
            seed,
            t,
            p,
            steps: Vec::new(),
            train_loss: None,
            nonfinite_workers: Vec::new(),
            val_loss: finite(val_loss),
            grad_norm_mean: None,
            grad_norm_max: None,
            synced: sync.is_some(),
            anomalies: sync.map_or(0, |s| s.anomalies),
            rollbacks: sync.map_or(0, |s| s.rollbacks),
            rollback: sync.is_some_and(|s| s.rollbacks > 0),
            beta_min: sync.and_then(|s| finite(s.min_beta)),
            beta_mean: sync.and_then(|s| finite(s.mean_beta)),
            samples_per_sec: None,
            wait_fraction: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub protocol: String,
    pub ablation: String,
    pub scenario: String,
    /// Lag seconds or bandwidth repeat factor of the scenario.
    pub magnitude: f64,
    pub seed: u64,
    pub status: RunStatus,
    pub rounds: u64,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub min_grad_norm: Option<f64>,
    pub samples_per_sec: Option<f64>,
    /// Throughput relative to the same cell without injection.
    pub retention: Option<f64>,
    pub wait_fraction: Option<f64>,
    pub error: String,
}

pub fn mean_of_last(values: impl Iterator<Item = Option<f64>>, k: usize) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        return None;
    }
    let tail = &v[v.len().saturating_sub(k)..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

pub fn final_train_loss(records: &[MetricsRecord]) -> Option<f64> {
    mean_of_last(records.iter().map(|r| r.train_loss), FINAL_WINDOW)
}

pub fn final_val_loss(records: &[MetricsRecord]) -> Option<f64> {
    mean_of_last(records.iter().map(|r| r.val_loss), FINAL_WINDOW)
}

pub fn min_grad_norm(records: &[MetricsRecord]) -> Option<f64> {
    records.iter().filter_map(|r| r.grad_norm_mean).reduce(f64::min)
}

pub fn write_jsonl(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| HarnessError::Runtime(e.to_string()))?;
        buf.push(b'\n');
    }
    write_file(path, &buf)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| HarnessError::Runtime(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    }
    let buf = w.into_inner().map_err(|e| HarnessError::Runtime(e.to_string()))?;
    write_file(path, &buf)
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<RunSummary>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::Runtime(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| HarnessError::Runtime(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    f.write_all(bytes).map_err(|e| HarnessError::io(path, e))
}
