//! Learning-rate sweep across worker counts.

use std::sync::Arc;

use edit_sim::timing::Injector;
use serde::{Deserialize, Serialize};

use crate::config::{with_inner_lr, ExperimentConfig, MeshConfig, Protocol};
use crate::error::Result;
use crate::metrics::RunStatus;
use crate::runner::{par_map, run_cell, Cell};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub protocol: String,
    pub workers: usize,
    /// Seed-mean final validation loss per grid lr; `None` if any seed failed.
    pub losses: Vec<Option<f64>>,
    pub argmin: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub lr_grid: Vec<f64>,
    pub rows: Vec<SweepRow>,
}

/// Flat CSV row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCsvRow {
    pub protocol: String,
    pub workers: usize,
    pub lr: f64,
    pub final_val_loss: Option<f64>,
    pub is_argmin: bool,
}

pub fn argmin(losses: &[Option<f64>]) -> Option<usize> {
    losses
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.filter(|x| x.is_finite()).map(|x| (i, x)))
        .fold(None, |best: Option<(usize, f64)>, (i, x)| match best {
            Some((_, b)) if b <= x => best,
            _ => Some((i, x)),
        })
        .map(|(i, _)| i)
}

impl SweepTable {
    fn argmins(&self, protocol: Protocol) -> Vec<Option<usize>> {
        self.rows
            .iter()
            .filter(|r| r.protocol == protocol.name())
            .map(|r| r.argmin)
            .collect()
    }

    /// Argmin position varies by at most one grid slot across worker counts.
    pub fn stable(&self, protocol: Protocol) -> Option<bool> {
        let idx: Option<Vec<usize>> = self.argmins(protocol).into_iter().collect();
        let idx = idx.filter(|v| !v.is_empty())?;
        Some(idx.iter().max()? - idx.iter().min()? <= 1)
    }

    /// Argmin is non-decreasing in worker count (rows are in sweep order).
    pub fn non_decreasing(&self, protocol: Protocol) -> Option<bool> {
        let idx: Option<Vec<usize>> = self.argmins(protocol).into_iter().collect();
        let idx = idx.filter(|v| !v.is_empty())?;
        Some(idx.windows(2).all(|w| w[0] <= w[1]))
    }

    pub fn csv_rows(&self) -> Vec<SweepCsvRow> {
        let mut out = Vec::new();
        for r in &self.rows {
            for (i, (&lr, &loss)) in self.lr_grid.iter().zip(&r.losses).enumerate() {
                out.push(SweepCsvRow {
                    protocol: r.protocol.clone(),
                    workers: r.workers,
                    lr,
                    final_val_loss: loss,
                    is_argmin: r.argmin == Some(i),
                });
            }
        }
        out
    }

    /// Plain-text argmin table.
    pub fn render(&self) -> String {
        let mut s = String::from("protocol        workers  argmin_lr\n");
        for r in &self.rows {
            let lr = r.argmin.map_or("-".to_string(), |i| format!("{:e}", self.lr_grid[i]));
            s.push_str(&format!("{:<15} {:>7}  {lr}\n", r.protocol, r.workers));
        }
        s
    }
}

/// For each protocol and worker count, runs every grid lr over all seeds on a
/// `rows × workers` mesh and records the lr with the lowest final
/// validation loss. Per-worker batch size is held fixed.
pub fn lr_sweep(cfg: &ExperimentConfig, lr_grid: &[f64], workers: &[usize]) -> Result<SweepTable> {
    cfg.validate()?;
    let task = Arc::new(cfg.task.build()?);
    let mut jobs = Vec::new();
    for &protocol in &cfg.protocols {
        for &k in workers {
            for &lr in lr_grid {
                for &seed in &cfg.seeds {
                    jobs.push((protocol, k, lr, seed));
                }
            }
        }
    }
    let losses = par_map(&jobs, |&(protocol, k, lr, seed)| {
        let mut c = cfg.clone();
        c.mesh = MeshConfig {
            rows: cfg.mesh.rows,
            cols: k,
        };
        c.inner = with_inner_lr(cfg.inner, lr);
        c.schedule = Some(edit_sim::optim::LrSchedule {
            base_lr: lr,
            ..cfg.schedule()
        });
        c.timing = None;
        c.name = format!("{}-k{k}-lr{lr:e}", cfg.name);
        let cell = Cell {
            protocol,
            injector: Injector::None,
            seed,
        };
        let out = run_cell(&c, &task, &cell);
        match out.summary.status {
            RunStatus::Ok => out.summary.final_val_loss,
            RunStatus::Failed => None,
        }
    });
    let per_seed = cfg.seeds.len();
    let mut rows = Vec::new();
    let mut chunks = losses.chunks(per_seed);
    for &protocol in &cfg.protocols {
        for &k in workers {
            let row_losses: Vec<Option<f64>> = lr_grid
                .iter()
                .map(|_| {
                    let seeds: Option<Vec<f64>> = chunks.next().unwrap().iter().copied().collect();
                    seeds.map(|v| v.iter().sum::<f64>() / v.len() as f64)
                })
                .collect();
            rows.push(SweepRow {
                protocol: protocol.name().to_string(),
                workers: k,
                argmin: argmin(&row_losses),
                losses: row_losses,
            });
        }
    }
    Ok(SweepTable {
        lr_grid: lr_grid.to_vec(),
        rows,
    })
}
