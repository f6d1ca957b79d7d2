//! Aggregates run outputs into summary tables and plot-data files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::metrics::{read_jsonl, read_summary_csv, write_csv, RunStatus, RunSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub protocol: String,
    pub ablation: String,
    pub scenario: String,
    pub magnitude: f64,
    pub runs: usize,
    pub failed: usize,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub samples_per_sec: Option<f64>,
    pub retention: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub run_id: String,
    pub t: u64,
    pub p: u64,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
}

/// Throughput (samples/sec) per lag, one column per protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub lag: f64,
    pub baseline: Option<f64>,
    pub edit: Option<f64>,
    pub a_edit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub curves: Vec<CurveRow>,
    /// `(scenario kind, rows)`.
    pub tables: Vec<(String, Vec<ThroughputRow>)>,
}

fn mean(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = v.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn inputs(path: &Path) -> Result<(PathBuf, Vec<PathBuf>)> {
    if path.is_dir() {
        let summary = path.join("summary.csv");
        let mut jsonl = Vec::new();
        let metrics = path.join("metrics");
        if metrics.is_dir() {
            for e in std::fs::read_dir(&metrics).map_err(|e| HarnessError::io(&metrics, e))? {
                let p = e.map_err(|e| HarnessError::io(&metrics, e))?.path();
                if p.extension().is_some_and(|x| x == "jsonl") {
                    jsonl.push(p);
                }
            }
        }
        jsonl.sort();
        Ok((summary, jsonl))
    } else if path.exists() {
        Ok((path.to_path_buf(), Vec::new()))
    } else {
        Err(HarnessError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ))
    }
}

pub fn summarize(summaries: &[RunSummary]) -> Vec<ReportRow> {
    let mut keys: Vec<(String, String, String, f64)> = Vec::new();
    for s in summaries {
        let k = (s.protocol.clone(), s.ablation.clone(), s.scenario.clone(), s.magnitude);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(protocol, ablation, scenario, magnitude)| {
            let group: Vec<&RunSummary> = summaries
                .iter()
                .filter(|s| s.protocol == protocol && s.ablation == ablation && s.scenario == scenario && s.magnitude == magnitude)
                .collect();
            let ok: Vec<&&RunSummary> = group.iter().filter(|s| s.status == RunStatus::Ok).collect();
            ReportRow {
                runs: group.len(),
                failed: group.len() - ok.len(),
                final_train_loss: mean(ok.iter().map(|s| s.final_train_loss)),
                final_val_loss: mean(ok.iter().map(|s| s.final_val_loss)),
                samples_per_sec: mean(ok.iter().map(|s| s.samples_per_sec)),
                retention: mean(ok.iter().map(|s| s.retention)),
                protocol,
                ablation,
                scenario,
                magnitude,
            }
        })
        .collect()
}

/// Throughput-vs-lag tables, one per injected scenario kind; clean runs
/// supply the zero-lag row of each.
pub fn throughput_tables(rows: &[ReportRow]) -> Vec<(String, Vec<ThroughputRow>)> {
    let mut kinds: Vec<String> = Vec::new();
    for r in rows {
        if r.scenario != "clean" && r.samples_per_sec.is_some() && !kinds.contains(&r.scenario) {
            kinds.push(r.scenario.clone());
        }
    }
    let pick = |scenario: &str, mag: f64, protocol: &str| {
        rows.iter()
            .find(|r| r.scenario == scenario && r.magnitude == mag && r.protocol == protocol && r.ablation.is_empty())
            .and_then(|r| r.samples_per_sec)
    };
    kinds
        .into_iter()
        .map(|kind| {
            let mut mags: Vec<f64> = rows.iter().filter(|r| r.scenario == kind).map(|r| r.magnitude).collect();
            mags.sort_by(f64::total_cmp);
            mags.dedup();
            let mut table = Vec::new();
            if rows.iter().any(|r| r.scenario == "clean" && r.samples_per_sec.is_some()) {
                table.push(ThroughputRow {
                    lag: 0.0,
                    baseline: pick("clean", 0.0, "baseline"),
                    edit: pick("clean", 0.0, "edit"),
                    a_edit: pick("clean", 0.0, "a_edit"),
                });
            }
            for m in mags {
                table.push(ThroughputRow {
                    lag: m,
                    baseline: pick(&kind, m, "baseline"),
                    edit: pick(&kind, m, "edit"),
                    a_edit: pick(&kind, m, "a_edit"),
                });
            }
            (kind, table)
        })
        .collect()
}

/// Reads run directories (or bare `summary.csv` files).
pub fn report(paths: &[PathBuf]) -> Result<Report> {
    let mut summaries = Vec::new();
    let mut curves = Vec::new();
    for path in paths {
        let (summary, jsonl) = inputs(path)?;
        if !summary.exists() {
            return Err(HarnessError::io(
                &summary,
                std::io::Error::new(std::io::ErrorKind::NotFound, "missing summary.csv"),
            ));
        }
        summaries.extend(read_summary_csv(&summary)?);
        for j in jsonl {
            for r in read_jsonl(&j)? {
                curves.push(CurveRow {
                    run_id: r.run_id,
                    t: r.t,
                    p: r.p,
                    train_loss: r.train_loss,
                    val_loss: r.val_loss,
                });
            }
        }
    }
    let rows = summarize(&summaries);
    let tables = throughput_tables(&rows);
    Ok(Report { rows, curves, tables })
}

pub fn write_report(report: &Report, dir: &Path) -> Result<()> {
    write_csv(&dir.join("report_summary.csv"), &report.rows)?;
    write_csv(&dir.join("loss_curves.csv"), &report.curves)?;
    for (kind, rows) in &report.tables {
        write_csv(&dir.join(format!("throughput_{kind}.csv")), rows)?;
    }
    Ok(())
}
