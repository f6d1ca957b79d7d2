//! Chained runs over changing worker counts.

use std::sync::Arc;

use edit_sim::protocol::{CarryState, Engine};
use edit_sim::task::LayeredTask;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Phase, Protocol};
use crate::error::Result;
use crate::metrics::{final_train_loss, final_val_loss, min_grad_norm, MetricsRecord, RunStatus, RunSummary};
use crate::runner::{drive, engine_config, par_map, RunOutput};

#[derive(Debug, Clone, PartialEq)]
pub struct ElasticRun {
    pub protocol: Protocol,
    pub seed: u64,
    pub phases: Vec<RunOutput>,
    /// Synchronized state after each completed phase.
    pub carried: Vec<CarryState>,
}

impl ElasticRun {
    pub fn final_val_loss(&self) -> Option<f64> {
        self.phases.last().and_then(|p| p.summary.final_val_loss)
    }

    pub fn failed(&self) -> bool {
        self.phases.iter().any(|p| p.summary.status == RunStatus::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticComparison {
    pub protocol: String,
    /// Seed mean of the last phase's final validation loss.
    pub final_val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ElasticResult {
    pub runs: Vec<ElasticRun>,
}

impl ElasticResult {
    pub fn comparison(&self) -> Vec<ElasticComparison> {
        let mut names: Vec<Protocol> = Vec::new();
        for r in &self.runs {
            if !names.contains(&r.protocol) {
                names.push(r.protocol);
            }
        }
        names
            .into_iter()
            .map(|p| {
                let v: Option<Vec<f64>> = self
                    .runs
                    .iter()
                    .filter(|r| r.protocol == p)
                    .map(|r| r.final_val_loss())
                    .collect();
                ElasticComparison {
                    protocol: p.name().to_string(),
                    final_val_loss: v.map(|v| v.iter().sum::<f64>() / v.len() as f64),
                }
            })
            .collect()
    }
}

/// Data stream seed of phase `i`; phase 0 uses the run seed as-is so a
/// single-phase chain equals a plain run.
pub fn phase_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn run_chain(cfg: &ExperimentConfig, task: &Arc<LayeredTask>, protocol: Protocol, seed: u64, phases: &[Phase]) -> ElasticRun {
    let mut out = ElasticRun {
        protocol,
        seed,
        phases: Vec::new(),
        carried: Vec::new(),
    };
    let mut state: Option<CarryState> = None;
    for (i, ph) in phases.iter().enumerate() {
        let run_id = format!("{}-{}-elastic-s{seed}-p{i}-w{}", cfg.name, protocol, ph.workers);
        let mut records: Vec<MetricsRecord> = Vec::new();
        let result = (|| -> edit_sim::Result<CarryState> {
            let mesh = edit_sim::mesh::DeviceMesh::new(cfg.mesh.rows, ph.workers)?;
            let ecfg = engine_config(cfg, protocol, phase_seed(seed, i), mesh);
            let mut engine = match &state {
                None => Engine::new(task.clone(), ecfg)?,
                Some(s) => Engine::with_state(task.clone(), ecfg, s)?,
            };
            drive(&mut engine, &run_id, seed, ph.rounds, None, &mut records)?;
            engine.export_state()
        })();
        let (status, error) = match &result {
            Ok(_) => (RunStatus::Ok, String::new()),
            Err(e) => (RunStatus::Failed, e.to_string()),
        };
        out.phases.push(RunOutput {
            summary: RunSummary {
                run_id,
                protocol: protocol.name().to_string(),
                ablation: cfg.ablation.label(),
                scenario: format!("elastic_w{}", ph.workers),
                magnitude: ph.workers as f64,
                seed,
                status,
                rounds: ph.rounds,
                final_train_loss: final_train_loss(&records),
                final_val_loss: final_val_loss(&records),
                min_grad_norm: min_grad_norm(&records),
                samples_per_sec: None,
                retention: None,
                wait_fraction: None,
                error,
            },
            records,
        });
        match result {
            Ok(s) => {
                out.carried.push(s.clone());
                state = Some(s);
            }
            Err(_) => break,
        }
    }
    out
}

/// Runs the phases in order for every (protocol, seed), re-initializing the
/// mesh at each boundary from the previous phase's synchronized parameters
/// and outer momentum. The learning rate is not retuned across phases.
pub fn elastic_chain(cfg: &ExperimentConfig, phases: &[Phase]) -> Result<ElasticResult> {
    cfg.validate()?;
    let task = Arc::new(cfg.task.build()?);
    let jobs: Vec<(Protocol, u64)> = cfg
        .protocols
        .iter()
        .flat_map(|&p| cfg.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let runs = par_map(&jobs, |&(p, s)| run_chain(cfg, &task, p, s, phases));
    Ok(ElasticResult { runs })
}
