//! Sharded execution of the training loop on an M×N mesh.
//!
//! Each worker stores, per layer, its anchor shard `θ_t` and the local
//! displacement `δ = θ_{t,p} − θ_t`; the working parameters are
//! `anchor + δ`. Warmup steps update the anchor directly and keep `δ = 0`,
//! so the pseudo-gradient at a sync is exactly the accumulated `δ`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::SyncConfig;
use super::penalty::{clip_coefficient, penalty_weights, uniform_weights, PenaltyOutcome, SyncStats};
use crate::error::{check_len, Error, Result};
use crate::math::Vector;
use crate::mesh::{
    all_gather, all_reduce_mean, reduce_scatter_mean, scalar_sum, weighted_all_reduce, DeviceMesh, GroupId,
    LayerShardSpec, WorkerId,
};
use crate::optim::{InnerOptConfig, InnerOptState, LrSchedule, OuterOptState};
use crate::task::{CorruptionSchedule, DataShard, LayeredTask};

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub mesh: DeviceMesh,
    pub sync: SyncConfig,
    pub inner: InnerOptConfig,
    /// Inner learning rate per step; the inner config's own lr is ignored.
    pub schedule: LrSchedule,
    /// Per-worker batch size.
    pub batch_size: usize,
    pub data_seed: u64,
    pub corruption: Option<CorruptionSchedule>,
    /// Record `‖∇L‖²` at every replica before every step (quadratic only).
    pub track_true_grad: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerState {
    anchor: Vector,
    delta: Vector,
    inner: InnerOptState,
    inner_at_sync: Option<InnerOptState>,
    outer: OuterOptState,
}

#[derive(Debug, Clone, PartialEq)]
struct WorkerState {
    id: WorkerId,
    layers: Vec<LayerState>,
    data: DataShard,
    /// Inner steps taken so far (`tτ + p` under the step policy).
    steps: u64,
    /// Local (non-warmup) steps since the last sync.
    local_steps: u64,
}

/// Synchronized parameters and outer momentum, unsharded, for chaining runs
/// across mesh sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarryState {
    pub params: Vec<Vector>,
    pub outer_momentum: Vec<Vector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncSummary {
    /// Round whose start triggered the sync.
    pub t: u64,
    pub outcomes: Vec<PenaltyOutcome>,
    /// Flagged (worker, layer) pairs.
    pub anomalies: usize,
    /// Rolled back (row, layer) pairs.
    pub rollbacks: usize,
    pub min_beta: f64,
    pub mean_beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub t: u64,
    /// Inner steps taken by each column.
    pub steps: Vec<u64>,
    pub sync: Option<SyncSummary>,
    /// Validation loss on the anchors after this round's sync.
    pub val_loss: f64,
    /// Mean over (worker, step) of the local training loss; non-finite
    /// losses are left out and their workers listed instead.
    pub train_loss: f64,
    pub nonfinite_workers: Vec<WorkerId>,
    /// Norm of the column-reduced gradient, over (column, step).
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
    /// Largest per-coordinate magnitude of any raw worker gradient.
    pub ginf_observed: f64,
    /// Per step: mean over replicas of `‖∇L(θ_replica)‖²` before the step.
    pub true_grad_sq: Vec<f64>,
}

#[derive(Default)]
struct StepAcc {
    loss_sum: f64,
    loss_count: usize,
    nonfinite: Vec<WorkerId>,
    grad_norm_sum: f64,
    grad_norm_max: f64,
    grad_norm_count: usize,
    ginf: f64,
    true_grad_sq: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Engine {
    cfg: EngineConfig,
    task: Arc<LayeredTask>,
    specs: Vec<LayerShardSpec>,
    workers: Vec<WorkerState>,
    stats: SyncStats,
    t: u64,
}

impl Engine {
    pub fn new(task: Arc<LayeredTask>, cfg: EngineConfig) -> Result<Self> {
        let params = task.initial_params();
        Self::build(task, cfg, &params, None)
    }

    /// Starts from carried-over parameters (and outer momentum).
    pub fn with_state(task: Arc<LayeredTask>, cfg: EngineConfig, state: &CarryState) -> Result<Self> {
        Self::build(task, cfg, &state.params, Some(&state.outer_momentum))
    }

    fn build(task: Arc<LayeredTask>, cfg: EngineConfig, params: &[Vector], momentum: Option<&[Vector]>) -> Result<Self> {
        cfg.sync.validate()?;
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let mesh = cfg.mesh;
        check_len("engine layers", task.num_layers(), params.len())?;
        if let Some(m) = momentum {
            check_len("engine momentum layers", task.num_layers(), m.len())?;
        }
        let specs: Vec<LayerShardSpec> = task
            .layers
            .iter()
            .map(|l| LayerShardSpec::new(l.param_count, mesh.rows))
            .collect();
        let mut shards = Vec::with_capacity(specs.len());
        let mut momentum_shards = Vec::with_capacity(specs.len());
        for (l, spec) in specs.iter().enumerate() {
            shards.push(spec.shard(&params[l])?);
            momentum_shards.push(match momentum {
                Some(m) => Some(spec.shard(&m[l])?),
                None => None,
            });
        }
        let workers = (0..mesh.workers())
            .map(|id| {
                let (row, _) = mesh.coord(id);
                let layers = specs
                    .iter()
                    .enumerate()
                    .map(|(l, spec)| {
                        let mut outer = OuterOptState::new(cfg.sync.outer, spec.shard_len);
                        if let Some(m) = &momentum_shards[l] {
                            outer.momentum = m[row].clone();
                        }
                        LayerState {
                            anchor: shards[l][row].clone(),
                            delta: Vector::zeros(spec.shard_len),
                            inner: InnerOptState::new(cfg.inner, spec.shard_len),
                            inner_at_sync: None,
                            outer,
                        }
                    })
                    .collect();
                let mut data = DataShard::new(id, cfg.data_seed);
                if let Some(c) = &cfg.corruption {
                    data = data.with_corruption(c.clone());
                }
                WorkerState {
                    id,
                    layers,
                    data,
                    steps: 0,
                    local_steps: 0,
                }
            })
            .collect();
        Ok(Self {
            stats: SyncStats::new(mesh.workers(), task.num_layers()),
            cfg,
            task,
            specs,
            workers,
            t: 0,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn task(&self) -> &LayeredTask {
        &self.task
    }

    pub fn mesh(&self) -> DeviceMesh {
        self.cfg.mesh
    }

    /// Next outer round index.
    pub fn round(&self) -> u64 {
        self.t
    }

    pub fn stats(&self) -> &SyncStats {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut SyncStats {
        &mut self.stats
    }

    /// Total inner steps taken by `worker`.
    pub fn worker_steps(&self, worker: WorkerId) -> u64 {
        self.workers[worker].steps
    }

    /// Whether the next step of `col` is a fully synchronous warmup step.
    pub fn in_warmup(&self, col: usize) -> bool {
        self.cfg.sync.is_warmup_step(self.workers[self.cfg.mesh.worker_at(0, col)].steps)
    }

    fn gather(&self, col: usize, f: impl Fn(&LayerState) -> Vector) -> Result<Vec<Vector>> {
        let members = self.cfg.mesh.members(GroupId::col(col))?;
        self.specs
            .iter()
            .enumerate()
            .map(|(l, spec)| {
                let shards: Vec<(WorkerId, Vector)> = members.iter().map(|&w| (w, f(&self.workers[w].layers[l]))).collect();
                let refs: Vec<(WorkerId, &Vector)> = shards.iter().map(|(w, v)| (*w, v)).collect();
                all_gather(&self.cfg.mesh, GroupId::col(col), &refs, spec)
            })
            .collect()
    }

    /// Full anchor parameters held by shard group `col`.
    pub fn anchor_params(&self, col: usize) -> Result<Vec<Vector>> {
        self.gather(col, |s| s.anchor.clone())
    }

    /// Full working parameters `θ_{t,p}` of replica `col`.
    pub fn replica_params(&self, col: usize) -> Result<Vec<Vector>> {
        self.gather(col, working)
    }

    /// Full outer momentum held by shard group `col`.
    pub fn outer_momentum(&self, col: usize) -> Result<Vec<Vector>> {
        self.gather(col, |s| {
            if s.outer.momentum.len() == s.anchor.len() {
                s.outer.momentum.clone()
            } else {
                Vector::zeros(s.anchor.len())
            }
        })
    }

    /// Synchronized state of column 0.
    pub fn export_state(&self) -> Result<CarryState> {
        Ok(CarryState {
            params: self.anchor_params(0)?,
            outer_momentum: self.outer_momentum(0)?,
        })
    }

    pub fn validation_loss(&self) -> Result<f64> {
        self.task.validation_loss(&self.anchor_params(0)?)
    }

    /// One round of `τ` steps on every column.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let steps = vec![self.cfg.sync.tau; self.cfg.mesh.cols];
        self.run_round_with_steps(&steps)
    }

    /// One round where column `j` takes `steps[j]` inner steps. Columns still
    /// in warmup must all take the same number of steps.
    pub fn run_round_with_steps(&mut self, steps: &[u64]) -> Result<RoundReport> {
        let mesh = self.cfg.mesh;
        check_len("run_round steps", mesh.cols, steps.len())?;
        let sync = self.sync_if_pending()?;
        let val_loss = self.validation_loss()?;
        let mut acc = StepAcc::default();
        let longest = steps.iter().copied().max().unwrap_or(0);
        for p in 0..longest {
            let active: Vec<usize> = (0..mesh.cols).filter(|&j| steps[j] > p).collect();
            self.step(p, &active, &mut acc)?;
        }
        let t = self.t;
        self.t += 1;
        let mut nonfinite = acc.nonfinite;
        nonfinite.sort_unstable();
        nonfinite.dedup();
        Ok(RoundReport {
            t,
            steps: steps.to_vec(),
            sync,
            val_loss,
            train_loss: mean(acc.loss_sum, acc.loss_count),
            nonfinite_workers: nonfinite,
            grad_norm_mean: mean(acc.grad_norm_sum, acc.grad_norm_count),
            grad_norm_max: acc.grad_norm_max,
            ginf_observed: acc.ginf,
            true_grad_sq: acc.true_grad_sq,
        })
    }

    /// Performs the sync that would open the next round, if one is due.
    pub fn finish(&mut self) -> Result<Option<SyncSummary>> {
        self.sync_if_pending()
    }

    fn step(&mut self, p: u64, active: &[usize], acc: &mut StepAcc) -> Result<()> {
        let mesh = self.cfg.mesh;
        let warm: Vec<bool> = active.iter().map(|&j| self.in_warmup(j)).collect();
        let any_warm = warm.iter().any(|&w| w);
        if any_warm && (active.len() != mesh.cols || !warm.iter().all(|&w| w)) {
            return Err(Error::Protocol("warmup steps must run on every column in lockstep".into()));
        }
        let t = self.t;
        let layers = self.specs.len();

        // Forward/backward per shard group; shard_grads[col][rank][layer].
        let mut shard_grads: Vec<Vec<Vec<Vector>>> = vec![Vec::new(); mesh.cols];
        let mut true_sq = Vec::new();
        for &j in active {
            let members = mesh.members(GroupId::col(j))?;
            let full = self.replica_params(j)?;
            if self.cfg.track_true_grad {
                if let Some(g) = self.task.true_gradient(&full) {
                    true_sq.push(g.iter().fold(0.0, |a, x| a + x * x));
                }
            }
            let mut grads = Vec::with_capacity(members.len());
            for &w in &members {
                let batch = self.task.sample_batch(&self.workers[w].data, t, p, self.cfg.batch_size);
                let (loss, g) = self.task.loss_and_grad(&full, &batch)?;
                if loss.is_finite() {
                    acc.loss_sum += loss;
                    acc.loss_count += 1;
                } else {
                    acc.nonfinite.push(w);
                }
                for gl in &g {
                    acc.ginf = acc.ginf.max(gl.max_abs());
                }
                grads.push(g);
            }
            let mut per_rank = vec![Vec::with_capacity(layers); members.len()];
            let mut sq = 0.0;
            for (l, spec) in self.specs.iter().enumerate() {
                let refs: Vec<(WorkerId, &Vector)> = members.iter().zip(&grads).map(|(&w, g)| (w, &g[l])).collect();
                let scattered = reduce_scatter_mean(&mesh, GroupId::col(j), &refs, spec)?;
                for (rank, s) in scattered.into_iter().enumerate() {
                    sq += s.sq_norm();
                    per_rank[rank].push(s);
                }
            }
            let norm = sq.sqrt();
            if norm.is_finite() {
                acc.grad_norm_sum += norm;
                acc.grad_norm_count += 1;
                acc.grad_norm_max = acc.grad_norm_max.max(norm);
            }
            shard_grads[j] = per_rank;
        }
        if !true_sq.is_empty() {
            acc.true_grad_sq.push(true_sq.iter().sum::<f64>() / true_sq.len() as f64);
        }

        if any_warm {
            for i in 0..mesh.rows {
                let members = mesh.members(GroupId::row(i))?;
                for l in 0..layers {
                    let refs: Vec<(WorkerId, &Vector)> =
                        members.iter().map(|&w| (w, &shard_grads[mesh.coord(w).1][i][l])).collect();
                    let mean = all_reduce_mean(&mesh, GroupId::row(i), &refs)?;
                    for j in 0..mesh.cols {
                        shard_grads[j][i][l] = mean.clone();
                    }
                }
            }
        }

        for &j in active {
            for i in 0..mesh.rows {
                let w = mesh.worker_at(i, j);
                let lr = self.cfg.schedule.at_step(self.workers[w].steps);
                let worker = &mut self.workers[w];
                let fresh_round = !any_warm && worker.local_steps == 0;
                for (l, state) in worker.layers.iter_mut().enumerate() {
                    if fresh_round {
                        state.inner_at_sync = Some(state.inner.clone());
                    }
                    let g = &shard_grads[j][i][l];
                    let theta = working(state);
                    match state.inner.update(&theta, g, lr) {
                        Ok(u) if any_warm => state.anchor.axpy_in_place(-1.0, &u)?,
                        Ok(u) => state.delta.axpy_in_place(-1.0, &u)?,
                        // warmup writes the anchor directly, so nothing can drop it
                        Err(e @ Error::Numeric(_)) if any_warm => return Err(e),
                        Err(Error::Numeric(_)) => {
                            // poisoned; the penalty drops this member at the next sync
                            state.delta.fill(f64::NAN);
                        }
                        Err(e) => return Err(e),
                    }
                }
                worker.steps += 1;
                if !any_warm {
                    worker.local_steps += 1;
                }
            }
        }
        Ok(())
    }

    fn sync_if_pending(&mut self) -> Result<Option<SyncSummary>> {
        if self.workers.iter().all(|w| w.local_steps == 0) {
            return Ok(None);
        }
        let mut outcomes = Vec::new();
        let mut anomalies = 0;
        for l in 0..self.specs.len() {
            let (out, flagged) = self.sync_layer(l)?;
            anomalies += flagged;
            outcomes.extend(out);
        }
        for w in &mut self.workers {
            w.local_steps = 0;
        }
        let rollbacks = outcomes.iter().filter(|o| o.rollback).count();
        let betas: Vec<f64> = outcomes.iter().filter(|o| !o.rollback).map(|o| o.beta).collect();
        Ok(Some(SyncSummary {
            t: self.t,
            anomalies,
            rollbacks,
            min_beta: betas.iter().copied().fold(1.0, f64::min),
            mean_beta: if betas.is_empty() { 1.0 } else { betas.iter().sum::<f64>() / betas.len() as f64 },
            outcomes,
        }))
    }

    /// Pseudo-gradient sync of layer `l` in every sync group.
    fn sync_layer(&mut self, l: usize) -> Result<(Vec<PenaltyOutcome>, usize)> {
        let mesh = self.cfg.mesh;
        let cfg = self.cfg.sync;
        let pen = cfg.penalty;

        // Module-level norm per replica: shard norms combined over the column.
        let mut col_norm = vec![0.0; mesh.cols];
        for (j, norm) in col_norm.iter_mut().enumerate() {
            let members = mesh.members(GroupId::col(j))?;
            let sq: Vec<(WorkerId, f64)> = members
                .iter()
                .map(|&w| (w, self.workers[w].layers[l].delta.sq_norm()))
                .collect();
            let g = scalar_sum(&mesh, GroupId::col(j), &sq)?.sqrt();
            *norm = if g.is_finite() { g } else { f64::INFINITY };
        }

        let mut norms = vec![0.0; mesh.workers()];
        let mut flags = vec![false; mesh.workers()];
        for (w, (norm, flag)) in norms.iter_mut().zip(flags.iter_mut()).enumerate() {
            let mut g = col_norm[mesh.coord(w).1];
            let stat = self.stats.get_mut(w, l);
            if pen.anomaly_elimination && stat.is_anomaly(g, cfg.delta, cfg.ema_warmup_rounds) {
                *flag = true;
                g = f64::INFINITY;
            }
            stat.update(g, cfg.alpha);
            *norm = g;
        }

        let mut averaged: Vec<Option<Vector>> = Vec::with_capacity(mesh.rows);
        let mut outcomes = Vec::with_capacity(mesh.rows);
        for i in 0..mesh.rows {
            let members = mesh.members(GroupId::row(i))?;
            let row_norms: Vec<f64> = members.iter().map(|&w| norms[w]).collect();
            let refs: Vec<(WorkerId, &Vector)> = members.iter().map(|&w| (w, &self.workers[w].layers[l].delta)).collect();
            let (weights, avg) = if pen.is_off() {
                let k = members.len() as f64;
                (Some(vec![1.0 / k; members.len()]), Some(all_reduce_mean(&mesh, GroupId::row(i), &refs)?))
            } else {
                let weights = if pen.weighted_averaging {
                    penalty_weights(&row_norms)
                } else {
                    uniform_weights(&row_norms)
                };
                let avg = match &weights {
                    Some(w) => Some(weighted_all_reduce(&mesh, GroupId::row(i), &refs, w)?),
                    None => None,
                };
                (weights, avg)
            };
            outcomes.push(PenaltyOutcome {
                layer: l,
                row: i,
                anomalies: members.iter().map(|&w| flags[w]).collect(),
                norms: row_norms,
                rollback: weights.is_none(),
                weights: weights.unwrap_or_else(|| vec![0.0; members.len()]),
                synced_norm: 0.0,
                beta: 1.0,
            });
            averaged.push(avg);
        }

        // Synced norm of the module, assembled over a shard group.
        let sq: Vec<(WorkerId, f64)> = (0..mesh.rows)
            .map(|i| (mesh.worker_at(i, 0), averaged[i].as_ref().map_or(0.0, |a| a.sq_norm())))
            .collect();
        let synced_norm = scalar_sum(&mesh, GroupId::col(0), &sq)?.sqrt();
        let beta = if pen.gradient_clip {
            clip_coefficient(synced_norm, cfg.phi, cfg.eps)
        } else {
            1.0
        };

        for (i, avg) in averaged.into_iter().enumerate() {
            outcomes[i].synced_norm = synced_norm;
            outcomes[i].beta = beta;
            let pseudo = avg.map(|a| if pen.gradient_clip { a.scaled(beta) } else { a });
            for w in mesh.members(GroupId::row(i))? {
                let state = &mut self.workers[w].layers[l];
                match &pseudo {
                    Some(d) => {
                        state.outer.step(&mut state.anchor, d)?;
                        if !state.anchor.is_finite() {
                            return Err(Error::Numeric("anchor after sync"));
                        }
                    }
                    None => {
                        if let Some(snap) = state.inner_at_sync.take() {
                            state.inner = snap;
                        }
                    }
                }
                state.delta.fill(0.0);
            }
        }
        let flagged = flags.iter().filter(|&&f| f).count();
        Ok((outcomes, flagged))
    }
}

fn working(s: &LayerState) -> Vector {
    let mut theta = s.anchor.clone();
    theta
        .as_mut_slice()
        .iter_mut()
        .zip(s.delta.iter())
        .for_each(|(a, d)| *a += d);
    theta
}

fn mean(sum: f64, count: usize) -> f64 {
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}
