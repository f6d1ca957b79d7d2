//! Runs the (protocol, scenario, seed) matrix of an experiment.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use edit_sim::mesh::DeviceMesh;
use edit_sim::protocol::{Engine, EngineConfig};
use edit_sim::task::LayeredTask;
use edit_sim::timing::{run_timed, Injector, TimedMetrics, TimingScenario};

use crate::config::{injector_label, ExperimentConfig, Protocol};
use crate::error::{HarnessError, Result};
use crate::metrics::{
    final_train_loss, final_val_loss, min_grad_norm, write_csv, write_jsonl, MetricsRecord, RunStatus, RunSummary,
};

pub const THREADS_ENV: &str = "EDIT_SIM_THREADS";

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub protocol: Protocol,
    pub injector: Injector,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub records: Vec<MetricsRecord>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentResult {
    pub runs: Vec<RunOutput>,
}

impl ExperimentResult {
    pub fn summaries(&self) -> Vec<RunSummary> {
        self.runs.iter().map(|r| r.summary.clone()).collect()
    }

    pub fn failed(&self) -> usize {
        self.runs.iter().filter(|r| r.summary.status == RunStatus::Failed).count()
    }
}

/// Max parallel cells from `EDIT_SIM_THREADS` (default 1).
pub fn threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Maps `f` over `items` on up to `threads()` threads, preserving order.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let n = threads().min(items.len().max(1));
    if n <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..n {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.unwrap()).collect()
}

pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let injectors = cfg
        .timing
        .as_ref()
        .map(|t| t.injectors.clone())
        .unwrap_or_else(|| vec![Injector::None]);
    let mut out = Vec::new();
    for &protocol in &cfg.protocols {
        for injector in &injectors {
            for &seed in &cfg.seeds {
                out.push(Cell {
                    protocol,
                    injector: injector.clone(),
                    seed,
                });
            }
        }
    }
    out
}

pub fn scenario_name(inj: &Injector) -> String {
    let (kind, m) = injector_label(inj);
    match inj {
        Injector::None => kind.to_string(),
        _ => format!("{kind}_{m}"),
    }
}

pub fn run_id(cfg: &ExperimentConfig, cell: &Cell) -> String {
    let mut id = format!("{}-{}", cfg.name, cell.protocol);
    let ablation = cfg.ablation.label();
    if !ablation.is_empty() {
        id.push('-');
        id.push_str(&ablation);
    }
    if cfg.timing.is_some() {
        id.push('-');
        id.push_str(&scenario_name(&cell.injector));
    }
    id.push_str(&format!("-s{}", cell.seed));
    id
}

pub fn engine_config(cfg: &ExperimentConfig, protocol: Protocol, seed: u64, mesh: DeviceMesh) -> EngineConfig {
    EngineConfig {
        mesh,
        sync: cfg.sync_for(protocol),
        inner: cfg.inner,
        schedule: cfg.schedule(),
        batch_size: cfg.batch_size,
        data_seed: seed,
        corruption: cfg.corruption.clone(),
        track_true_grad: cfg.track_true_grad,
    }
}

pub fn layer_sizes(task: &LayeredTask) -> Vec<usize> {
    task.layers.iter().map(|l| l.param_count).collect()
}

struct Timed {
    metrics: TimedMetrics,
    retention: f64,
}

fn run_timing(scn: &TimingScenario, rounds: u64) -> Result<Timed> {
    let metrics = run_timed(scn, rounds)?;
    let clean = run_timed(
        &TimingScenario {
            injector: Injector::None,
            ..scn.clone()
        },
        rounds,
    )?;
    Ok(Timed {
        retention: metrics.samples_per_sec / clean.samples_per_sec,
        metrics,
    })
}

/// Drives `engine` for `rounds` rounds, with per-round column step counts
/// taken from `timed` when given. Appends records as it goes so a failure
/// keeps everything up to the failing round.
pub fn drive(
    engine: &mut Engine,
    run_id: &str,
    seed: u64,
    rounds: u64,
    timed: Option<&TimedMetrics>,
    records: &mut Vec<MetricsRecord>,
) -> edit_sim::Result<()> {
    let mesh = engine.mesh();
    let mut p = records.last().map_or(0, |r| r.p);
    for r in 0..rounds as usize {
        let report = match timed {
            Some(m) => engine.run_round_with_steps(&m.rounds[r].steps)?,
            _ => engine.run_round()?,
        };
        p += report.steps[0];
        let mut rec = MetricsRecord::from_round(run_id, seed, p, &report);
        if let Some(m) = timed {
            let tr = &m.rounds[r];
            let wall = edit_sim::timing::to_seconds(tr.wall);
            if wall > 0.0 {
                let samples = tr.steps.iter().sum::<u64>() * mesh.rows as u64 * engine.config().batch_size as u64;
                rec.samples_per_sec = Some(samples as f64 / wall);
                let waits: u64 = tr.sync_waits.iter().sum();
                rec.wait_fraction = Some(waits as f64 / (tr.wall as f64 * mesh.workers() as f64));
            }
        }
        records.push(rec);
    }
    let fin = engine.finish()?;
    let val = engine.validation_loss()?;
    records.push(MetricsRecord::closing(run_id, seed, engine.round(), p, fin.as_ref(), val));
    Ok(())
}

pub fn run_cell(cfg: &ExperimentConfig, task: &Arc<LayeredTask>, cell: &Cell) -> RunOutput {
    let id = run_id(cfg, cell);
    let (kind, magnitude) = injector_label(&cell.injector);
    let mut records = Vec::new();
    let mut timed = None;
    let outcome = (|| -> Result<()> {
        let mesh = cfg.device_mesh()?;
        if let Some(scn) = cfg.timing_scenario(cell.protocol, &cell.injector, &layer_sizes(task)) {
            timed = Some(run_timing(&scn, cfg.rounds)?);
        }
        let ecfg = engine_config(cfg, cell.protocol, cell.seed, mesh);
        let mut engine = Engine::new(task.clone(), ecfg)?;
        drive(
            &mut engine,
            &id,
            cell.seed,
            cfg.rounds,
            timed.as_ref().map(|t| &t.metrics),
            &mut records,
        )?;
        Ok(())
    })();
    let (status, error) = match outcome {
        Ok(()) => (RunStatus::Ok, String::new()),
        Err(e) => (RunStatus::Failed, e.to_string()),
    };
    let summary = RunSummary {
        run_id: id,
        protocol: cell.protocol.name().to_string(),
        ablation: cfg.ablation.label(),
        scenario: kind.to_string(),
        magnitude,
        seed: cell.seed,
        status,
        rounds: cfg.rounds,
        final_train_loss: final_train_loss(&records),
        final_val_loss: final_val_loss(&records),
        min_grad_norm: min_grad_norm(&records),
        samples_per_sec: timed.as_ref().map(|t| t.metrics.samples_per_sec),
        retention: timed.as_ref().map(|t| t.retention),
        wait_fraction: timed.as_ref().map(|t| t.metrics.wait_fraction()),
        error,
    };
    RunOutput { summary, records }
}

/// Runs every cell; a failing cell is marked failed and the rest continue.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let task = Arc::new(cfg.task.build()?);
    let runs = par_map(&cells(cfg), |cell| run_cell(cfg, &task, cell));
    Ok(ExperimentResult { runs })
}

/// Writes `metrics/<run_id>.jsonl` per run and `summary.csv`.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<()> {
    for run in &result.runs {
        write_jsonl(&dir.join("metrics").join(format!("{}.jsonl", run.summary.run_id)), &run.records)?;
    }
    write_csv(&dir.join("summary.csv"), &result.summaries())
}

/// Pass conditions of `run --check`.
pub fn evaluate_checks(cfg: &ExperimentConfig, result: &ExperimentResult) -> Result<()> {
    let Some(checks) = &cfg.checks else {
        return Ok(());
    };
    let mut problems = Vec::new();
    for s in result.summaries() {
        if checks.no_failed_runs && s.status == RunStatus::Failed {
            problems.push(format!("{} failed: {}", s.run_id, s.error));
        }
        if let Some(max) = checks.max_final_val_loss {
            match s.final_val_loss {
                Some(v) if v <= max => {}
                v => problems.push(format!("{} final val loss {v:?} > {max}", s.run_id)),
            }
        }
        if let (Some(min), Some(r)) = (checks.min_retention, s.retention) {
            if r < min {
                problems.push(format!("{} retention {r:.4} < {min}", s.run_id));
            }
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::Check(problems.join("; ")))
    }
}
