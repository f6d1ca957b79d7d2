//! Discrete-event timing model: alpha-beta collective costs, prefetch
//! overlap, straggler and bandwidth injection, step- and time-based sync
//! policies, and a per-worker time ledger.
//!
//! Time is kept in integer nanoseconds so the ledger is exact. A shard group
//! (mesh column) meets at a collective every step, so a lagging worker
//! stalls its whole column; columns only meet at syncs, except for the
//! synchronous baseline which all-reduces over rows every step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Rng;
use crate::mesh::{DeviceMesh, WorkerId};

const TAG_STRAGGLER: u64 = 0x57A6;
const BYTES_PER_ELEM: f64 = 8.0;

pub type Nanos = u64;

pub fn to_nanos(seconds: f64) -> Nanos {
    (seconds * 1e9).round().max(0.0) as Nanos
}

pub fn to_seconds(ns: Nanos) -> f64 {
    ns as f64 * 1e-9
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overlap {
    None,
    #[default]
    Prefetch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    /// Forward seconds per parameter per step.
    pub compute_time_per_param: f64,
    /// Backward cost relative to forward.
    #[serde(default = "default_backward_ratio")]
    pub backward_ratio: f64,
    /// Shard-group (intra-node) latency, seconds.
    pub alpha_shard: f64,
    /// Shard-group inverse bandwidth, seconds per byte.
    pub beta_shard: f64,
    /// Sync-group (inter-node) latency, seconds.
    pub alpha_sync: f64,
    /// Sync-group inverse bandwidth, seconds per byte.
    pub beta_sync: f64,
    #[serde(default)]
    pub overlap: Overlap,
    /// Extra seconds per layer per sync for moving offloaded state.
    #[serde(default)]
    pub offload_penalty: f64,
    /// Per-worker compute slowdown factor; missing entries are 1.
    #[serde(default)]
    pub slowdown: Vec<f64>,
}

fn default_backward_ratio() -> f64 {
    2.0
}

/// `α + β·8V·(P−1)/P`, zero for a singleton group.
pub fn collective_cost(alpha: f64, beta: f64, elems: usize, group: usize) -> f64 {
    if group <= 1 {
        return 0.0;
    }
    let p = group as f64;
    alpha + beta * BYTES_PER_ELEM * elems as f64 * (p - 1.0) / p
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.compute_time_per_param,
            self.backward_ratio,
            self.alpha_shard,
            self.beta_shard,
            self.alpha_sync,
            self.beta_sync,
            self.offload_penalty,
        ];
        if fields.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) || self.slowdown.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("cost model values must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn slowdown_of(&self, worker: WorkerId) -> f64 {
        self.slowdown.get(worker).copied().unwrap_or(1.0)
    }

    pub fn forward_time(&self, worker: WorkerId, params: usize) -> f64 {
        self.compute_time_per_param * params as f64 * self.slowdown_of(worker)
    }

    pub fn compute_time(&self, worker: WorkerId, params: usize) -> f64 {
        self.forward_time(worker, params) * (1.0 + self.backward_ratio)
    }

    pub fn shard_collective(&self, elems: usize, group: usize) -> f64 {
        collective_cost(self.alpha_shard, self.beta_shard, elems, group)
    }

    pub fn sync_collective(&self, elems: usize, group: usize) -> f64 {
        collective_cost(self.alpha_sync, self.beta_sync, elems, group)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Injector {
    #[default]
    None,
    /// Each step slot, one uniformly drawn worker pauses for `lag` seconds.
    RandomStraggler {
        lag: f64,
        #[serde(default)]
        seed: u64,
    },
    /// The listed workers pause for `lag` seconds every step.
    ConsistentStraggler {
        lag: f64,
        #[serde(default = "first_worker")]
        workers: Vec<WorkerId>,
    },
    /// Sync-group communication is repeated `repeat` times.
    LimitedBandwidth { repeat: u32 },
}

fn first_worker() -> Vec<WorkerId> {
    vec![0]
}

impl Injector {
    pub fn validate(&self) -> Result<()> {
        match self {
            Injector::RandomStraggler { lag, .. } | Injector::ConsistentStraggler { lag, .. } if !(*lag >= 0.0) => {
                Err(Error::Config("injector lag must be >= 0".into()))
            }
            Injector::LimitedBandwidth { repeat } if *repeat < 1 => {
                Err(Error::Config("injector repeat must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Lag charged to `worker` at its `slot`-th step.
    pub fn lag(&self, worker: WorkerId, slot: u64, workers: usize) -> f64 {
        match self {
            Injector::RandomStraggler { lag, seed } => {
                let chosen = Rng::derived(*seed, &[TAG_STRAGGLER, slot]).below(workers);
                if chosen == worker {
                    *lag
                } else {
                    0.0
                }
            }
            Injector::ConsistentStraggler { lag, workers } if workers.contains(&worker) => *lag,
            _ => 0.0,
        }
    }

    pub fn repeat(&self) -> f64 {
        match self {
            Injector::LimitedBandwidth { repeat } => *repeat as f64,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyncPolicy {
    /// Sync every `tau` inner steps.
    Step { tau: u64 },
    /// Each column syncs once `tau_time` seconds have elapsed since the last
    /// sync; checked at step boundaries only.
    Time { tau_time: f64 },
}

impl SyncPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SyncPolicy::Step { tau } if tau == 0 => Err(Error::Config("policy tau must be >= 1".into())),
            SyncPolicy::Time { tau_time } if !(tau_time > 0.0) => Err(Error::Config("tau_time must be > 0".into())),
            _ => Ok(()),
        }
    }
}

/// How gradients cross sync groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncMode {
    /// Row all-reduce of gradients every step.
    Synchronous,
    /// Periodic pseudo-gradient sync.
    Local,
}

/// Per step seconds of one worker.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepCost {
    /// Forward + backward compute plus injected lag.
    pub compute: f64,
    pub shard_comm: f64,
    pub sync_comm: f64,
}

impl StepCost {
    pub fn total(&self) -> f64 {
        self.compute + self.shard_comm + self.sync_comm
    }
}

/// Cost of one inner step of `worker`: per layer an all-gather in forward,
/// an all-gather and a reduce-scatter in backward over the shard group, and
/// for the synchronous mode a row all-reduce of the gradient shard.
pub fn step_cost(
    worker: WorkerId,
    cost: &CostModel,
    injector: &Injector,
    mesh: &DeviceMesh,
    layer_sizes: &[usize],
    mode: SyncMode,
    slot: u64,
) -> StepCost {
    let mut c = base_step_cost(worker, cost, injector.repeat(), mesh, layer_sizes, mode);
    c.compute += injector.lag(worker, slot, mesh.workers());
    c
}

/// `step_cost` without the injected lag.
fn base_step_cost(
    worker: WorkerId,
    cost: &CostModel,
    repeat: f64,
    mesh: &DeviceMesh,
    layer_sizes: &[usize],
    mode: SyncMode,
) -> StepCost {
    let params: usize = layer_sizes.iter().sum();
    let shard_comm = layer_sizes
        .iter()
        .map(|&v| 3.0 * cost.shard_collective(v, mesh.rows))
        .sum();
    let sync_comm = match mode {
        SyncMode::Synchronous => {
            repeat
                * layer_sizes
                    .iter()
                    .map(|&v| 2.0 * cost.sync_collective(v.div_ceil(mesh.rows), mesh.cols))
                    .sum::<f64>()
        }
        SyncMode::Local => 0.0,
    };
    StepCost {
        compute: cost.compute_time(worker, params),
        shard_comm,
        sync_comm,
    }
}

/// Sync communication of one layer at a sync: weighted all-reduce of the
/// shard over the row, norm scalars over the column and row, plus offload.
pub fn layer_sync_comm(cost: &CostModel, injector: &Injector, mesh: &DeviceMesh, layer_size: usize) -> f64 {
    let repeat = injector.repeat();
    let shard = layer_size.div_ceil(mesh.rows);
    let row = 2.0 * cost.sync_collective(shard, mesh.cols) + cost.sync_collective(0, mesh.cols);
    let col = 2.0 * cost.shard_collective(0, mesh.rows);
    repeat * row + col + cost.offload_penalty
}

/// Charged (non-hidden) sync time per layer. With prefetch, layer `l`'s sync
/// overlaps the forward computation of layer `l − 1`; the first layer's sync
/// is always exposed.
pub fn schedule_sync_overlap(comm: &[f64], forward_compute: &[f64], overlap: Overlap) -> Vec<f64> {
    match overlap {
        Overlap::None => comm.to_vec(),
        Overlap::Prefetch => comm
            .iter()
            .enumerate()
            .map(|(l, &c)| if l == 0 { c } else { (c - forward_compute[l - 1]).max(0.0) })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ledger {
    pub compute: Nanos,
    pub shard_comm: Nanos,
    pub sync_comm: Nanos,
    pub wait: Nanos,
}

impl Ledger {
    pub fn total(&self) -> Nanos {
        self.compute + self.shard_comm + self.sync_comm + self.wait
    }
}

/// Per-worker simulated clocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimClock {
    pub elapsed: Vec<Nanos>,
    pub ledger: Vec<Ledger>,
    /// Set once any clock would pass `u64::MAX` nanoseconds.
    pub overflowed: bool,
}

impl SimClock {
    pub fn new(workers: usize) -> Self {
        Self {
            elapsed: vec![0; workers],
            ledger: vec![Ledger::default(); workers],
            overflowed: false,
        }
    }

    fn charge(&mut self, w: WorkerId, f: impl FnOnce(&mut Ledger) -> &mut Nanos, ns: Nanos) {
        let slot = f(&mut self.ledger[w]);
        match (slot.checked_add(ns), self.elapsed[w].checked_add(ns)) {
            (Some(a), Some(b)) => {
                *slot = a;
                self.elapsed[w] = b;
            }
            _ => self.overflowed = true,
        }
    }

    /// Everyone in `workers` waits for the latest; returns each wait.
    fn barrier(&mut self, workers: &[WorkerId]) -> Vec<Nanos> {
        let latest = workers.iter().map(|&w| self.elapsed[w]).max().unwrap_or(0);
        workers
            .iter()
            .map(|&w| {
                let wait = latest - self.elapsed[w];
                self.charge(w, |l| &mut l.wait, wait);
                wait
            })
            .collect()
    }

    pub fn wall(&self) -> Nanos {
        self.elapsed.iter().copied().max().unwrap_or(0)
    }
}

/// One timed scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingScenario {
    pub mesh: DeviceMesh,
    pub layer_sizes: Vec<usize>,
    pub cost: CostModel,
    pub injector: Injector,
    pub policy: SyncPolicy,
    pub mode: SyncMode,
    pub batch_size: usize,
    /// Leading rounds run synchronously in lockstep (warmup).
    pub warmup_rounds: u64,
    /// Step count of a warmup round and of a step-policy round.
    pub tau: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedRound {
    /// Inner steps per column.
    pub steps: Vec<u64>,
    /// Wall-clock length of the round including its sync.
    pub wall: Nanos,
    /// Per-worker wait at the end-of-round barrier.
    pub sync_waits: Vec<Nanos>,
    /// Longest column step duration (compute, lag and shard comm).
    pub max_step: Nanos,
    pub sync_comm: Nanos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedMetrics {
    pub rounds: Vec<TimedRound>,
    pub clock: SimClock,
    pub total_steps: u64,
    pub samples_per_sec: f64,
}

impl TimedMetrics {
    pub fn wall_seconds(&self) -> f64 {
        to_seconds(self.clock.wall())
    }

    pub fn wait_fraction(&self) -> f64 {
        let wait: Nanos = self.clock.ledger.iter().map(|l| l.wait).sum();
        let total: Nanos = self.clock.ledger.iter().map(|l| l.total()).sum();
        if total == 0 {
            0.0
        } else {
            wait as f64 / total as f64
        }
    }
}

impl TimingScenario {
    pub fn validate(&self) -> Result<()> {
        self.cost.validate()?;
        self.injector.validate()?;
        self.policy.validate()?;
        if self.tau == 0 || self.batch_size == 0 {
            return Err(Error::Config("timing tau and batch_size must be >= 1".into()));
        }
        Ok(())
    }

    fn sync_visible(&self) -> Nanos {
        let comm: Vec<f64> = self
            .layer_sizes
            .iter()
            .map(|&v| layer_sync_comm(&self.cost, &self.injector, &self.mesh, v))
            .collect();
        let fwd: Vec<f64> = self
            .layer_sizes
            .iter()
            .map(|&v| self.cost.compute_time_per_param * v as f64)
            .collect();
        schedule_sync_overlap(&comm, &fwd, self.cost.overlap)
            .into_iter()
            .map(to_nanos)
            .sum()
    }

    fn base_costs(&self, mode: SyncMode) -> Vec<StepCost> {
        (0..self.mesh.workers())
            .map(|w| base_step_cost(w, &self.cost, self.injector.repeat(), &self.mesh, &self.layer_sizes, mode))
            .collect()
    }
}

/// One step on `members`: compute (with lag), wait for the slowest, then
/// communicate. Returns the step duration.
fn timed_step(
    clock: &mut SimClock,
    members: &[WorkerId],
    base: &[StepCost],
    injector: &Injector,
    slot: u64,
) -> Nanos {
    let workers = base.len();
    let start = members.iter().map(|&w| clock.elapsed[w]).max().unwrap_or(0);
    for &w in members {
        let compute = base[w].compute + injector.lag(w, slot, workers);
        clock.charge(w, |l| &mut l.compute, to_nanos(compute));
    }
    clock.barrier(members);
    for &w in members {
        clock.charge(w, |l| &mut l.shard_comm, to_nanos(base[w].shard_comm));
        clock.charge(w, |l| &mut l.sync_comm, to_nanos(base[w].sync_comm));
    }
    members.iter().map(|&w| clock.elapsed[w]).max().unwrap_or(0) - start
}

/// Simulates `rounds` rounds of the scenario.
pub fn run_timed(scn: &TimingScenario, rounds: u64) -> Result<TimedMetrics> {
    scn.validate()?;
    let mesh = scn.mesh;
    let all: Vec<WorkerId> = (0..mesh.workers()).collect();
    let columns: Vec<Vec<WorkerId>> = (0..mesh.cols)
        .map(|j| (0..mesh.rows).map(|i| mesh.worker_at(i, j)).collect())
        .collect();
    let sync_ns = scn.sync_visible();
    let base_sync = scn.base_costs(SyncMode::Synchronous);
    let base_local = scn.base_costs(SyncMode::Local);
    let mut clock = SimClock::new(mesh.workers());
    let mut out = Vec::with_capacity(rounds as usize);
    let mut total_steps = 0u64;
    let mut col_steps_done = vec![0u64; mesh.cols];

    for r in 0..rounds {
        let round_start = clock.wall();
        let mut steps = vec![0u64; mesh.cols];
        let mut max_step = 0;
        let synchronous = scn.mode == SyncMode::Synchronous || r < scn.warmup_rounds;
        if synchronous {
            for _ in 0..scn.tau {
                let slot = col_steps_done[0];
                max_step = max_step.max(timed_step(&mut clock, &all, &base_sync, &scn.injector, slot));
                col_steps_done.iter_mut().for_each(|s| *s += 1);
                steps.iter_mut().for_each(|s| *s += 1);
            }
        } else {
            for (j, members) in columns.iter().enumerate() {
                let begin = clock.elapsed[members[0]];
                loop {
                    let done = steps[j];
                    let more = match scn.policy {
                        SyncPolicy::Step { tau } => done < tau,
                        SyncPolicy::Time { tau_time } => {
                            done == 0 || clock.elapsed[members[0]] - begin < to_nanos(tau_time)
                        }
                    };
                    if !more {
                        break;
                    }
                    let slot = col_steps_done[j];
                    max_step = max_step.max(timed_step(&mut clock, members, &base_local, &scn.injector, slot));
                    col_steps_done[j] += 1;
                    steps[j] += 1;
                }
            }
        }
        let sync_waits = clock.barrier(&all);
        let mut sync_comm = 0;
        if !synchronous {
            for &w in &all {
                clock.charge(w, |l| &mut l.sync_comm, sync_ns);
            }
            sync_comm = sync_ns;
        }
        total_steps += steps.iter().sum::<u64>() * mesh.rows as u64;
        out.push(TimedRound {
            steps,
            wall: clock.wall() - round_start,
            sync_waits,
            max_step,
            sync_comm,
        });
    }
    if clock.overflowed {
        return Err(Error::Domain("simulated time exceeds u64 nanoseconds".into()));
    }
    let wall = to_seconds(clock.wall());
    let samples_per_sec = if wall > 0.0 {
        (total_steps * scn.batch_size as u64) as f64 / wall
    } else {
        0.0
    };
    Ok(TimedMetrics {
        rounds: out,
        clock,
        total_steps,
        samples_per_sec,
    })
}

/// Throughput of `scn` relative to the same scenario without injection.
pub fn retention(scn: &TimingScenario, rounds: u64) -> Result<f64> {
    let clean = TimingScenario {
        injector: Injector::None,
        ..scn.clone()
    };
    Ok(run_timed(scn, rounds)?.samples_per_sec / run_timed(&clean, rounds)?.samples_per_sec)
}

/// Throughput-ratio targets for the synchronous baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTargets {
    /// `(lag seconds, retention)` under a consistent straggler; the last
    /// entry is fitted, all are checked.
    pub lag_retention: Vec<(f64, f64)>,
    /// `(repeat, retention)` under limited bandwidth.
    pub bandwidth_retention: (u32, f64),
    /// Allowed relative error per lag entry.
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub cost: CostModel,
    /// `(lag, target, achieved)`.
    pub lag_fit: Vec<(f64, f64, f64)>,
    pub bandwidth_fit: (u32, f64, f64),
    pub iterations: usize,
}

/// Finds `x > 0` with `f(x) = 0` for increasing `f`, growing a bracket
/// geometrically from `x0` before bisecting in log space.
fn solve_log(x0: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let unbracketed = |why: String| Error::Calibration(format!("target not bracketed from {x0:e}: {why}"));
    let f0 = f(x0)?;
    if f0 == 0.0 {
        return Ok(x0);
    }
    let step = if f0 < 0.0 { 2.0 } else { 0.5 };
    let (mut lo, mut hi) = (x0, x0);
    let mut x = x0;
    for _ in 0..MAX_BRACKET_STEPS {
        x *= step;
        let fx = f(x).map_err(|e| unbracketed(e.to_string()))?;
        if f0 < 0.0 {
            lo = hi;
            hi = x;
            if fx >= 0.0 {
                break;
            }
        } else {
            hi = lo;
            lo = x;
            if fx <= 0.0 {
                break;
            }
        }
    }
    if f(lo)? > 0.0 || f(hi)? < 0.0 {
        return Err(unbracketed(format!("searched [{lo:e}, {hi:e}]")));
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if f(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo < 1.0 + 1e-12 {
            break;
        }
    }
    Ok((lo * hi).sqrt())
}

const MAX_BRACKET_STEPS: usize = 120;

fn positive(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        1e-12
    }
}

/// Fits compute speed to the baseline straggler curve and sync-group
/// bandwidth to the baseline bandwidth curve.
/// `template` supplies mesh, layers and the remaining cost terms; its mode
/// and injector are replaced.
pub fn calibrate(template: &TimingScenario, targets: &CalibrationTargets) -> Result<CalibrationReport> {
    let &(fit_lag, fit_ret) = targets
        .lag_retention
        .last()
        .ok_or_else(|| Error::Calibration("no lag targets".into()))?;
    let (repeat, bw_ret) = targets.bandwidth_retention;
    let base = TimingScenario {
        mode: SyncMode::Synchronous,
        policy: SyncPolicy::Step { tau: template.tau },
        warmup_rounds: 0,
        ..template.clone()
    };
    let lag_ret = |cost: &CostModel, lag: f64| {
        retention(
            &TimingScenario {
                cost: cost.clone(),
                injector: Injector::ConsistentStraggler { lag, workers: vec![0] },
                ..base.clone()
            },
            1,
        )
    };
    let bw_of = |cost: &CostModel| {
        retention(
            &TimingScenario {
                cost: cost.clone(),
                injector: Injector::LimitedBandwidth { repeat },
                ..base.clone()
            },
            1,
        )
    };
    let mut iterations = 0;
    // slower links -> repeating them hurts more -> retention falls
    let fit_beta = |cost: &CostModel| -> Result<f64> {
        solve_log(positive(cost.beta_sync), |x| {
            let c = CostModel {
                beta_sync: x,
                ..cost.clone()
            };
            Ok(bw_ret - bw_of(&c)?)
        })
    };
    // more compute per param -> lag matters less -> retention rises, with
    // the link speed refitted at every probe so both targets hold together
    let compute = solve_log(positive(template.cost.compute_time_per_param), |x| {
        iterations += 1;
        let mut c = CostModel {
            compute_time_per_param: x,
            ..template.cost.clone()
        };
        c.beta_sync = fit_beta(&c)?;
        Ok(lag_ret(&c, fit_lag)? - fit_ret)
    })?;
    let mut cost = CostModel {
        compute_time_per_param: compute,
        ..template.cost.clone()
    };
    cost.beta_sync = fit_beta(&cost)?;
    let mut lag_fit = Vec::new();
    for &(lag, target) in &targets.lag_retention {
        let achieved = lag_ret(&cost, lag)?;
        if ((achieved - target) / target).abs() > targets.tolerance {
            return Err(Error::Calibration(format!(
                "lag {lag}: retention {achieved:.4} vs target {target:.4} exceeds tolerance"
            )));
        }
        lag_fit.push((lag, target, achieved));
    }
    let achieved_bw = bw_of(&cost)?;
    if ((achieved_bw - bw_ret) / bw_ret).abs() > targets.tolerance {
        return Err(Error::Calibration(format!(
            "repeat {repeat}: retention {achieved_bw:.4} vs target {bw_ret:.4}"
        )));
    }
    Ok(CalibrationReport {
        cost,
        lag_fit,
        bandwidth_fit: (repeat, bw_ret, achieved_bw),
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cost() -> CostModel {
        CostModel {
            compute_time_per_param: 1e-6,
            backward_ratio: 2.0,
            alpha_shard: 1e-5,
            beta_shard: 1e-10,
            alpha_sync: 1e-4,
            beta_sync: 1e-9,
            overlap: Overlap::Prefetch,
            offload_penalty: 0.0,
            slowdown: Vec::new(),
        }
    }

    fn scenario(policy: SyncPolicy, mode: SyncMode) -> TimingScenario {
        TimingScenario {
            mesh: DeviceMesh::new(2, 3).unwrap(),
            layer_sizes: vec![1000, 2000, 1500],
            cost: cost(),
            injector: Injector::None,
            policy,
            mode,
            batch_size: 4,
            warmup_rounds: 0,
            tau: 8,
        }
    }

    #[test]
    fn alpha_beta_example() {
        let c = collective_cost(1e-4, 1e-9, 1_000_000, 4);
        assert!((c - 0.0061).abs() < 1e-12);
        assert_eq!(collective_cost(1e-4, 1e-9, 1_000_000, 1), 0.0);
        assert_eq!(collective_cost(1e-4, 1e-9, 0, 4), 1e-4);
    }

    #[test]
    fn overlap_examples() {
        let comm = [5.0; 4];
        let fwd = [3.0; 4];
        let v: f64 = schedule_sync_overlap(&comm, &fwd, Overlap::Prefetch).iter().sum();
        assert_eq!(v, 11.0);
        let v: f64 = schedule_sync_overlap(&comm, &fwd, Overlap::None).iter().sum();
        assert_eq!(v, 20.0);
        let hidden = schedule_sync_overlap(&[2.0, 2.0, 2.0], &[3.0; 3], Overlap::Prefetch);
        assert_eq!(hidden, vec![2.0, 0.0, 0.0]);
    }

    #[test]
    fn homogeneous_step_policy_never_waits() {
        for mode in [SyncMode::Local, SyncMode::Synchronous] {
            let m = run_timed(&scenario(SyncPolicy::Step { tau: 8 }, mode), 5).unwrap();
            assert!(m.clock.ledger.iter().all(|l| l.wait == 0));
        }
    }

    #[test]
    fn ledger_sums_to_elapsed() {
        let mut s = scenario(SyncPolicy::Time { tau_time: 0.05 }, SyncMode::Local);
        s.injector = Injector::RandomStraggler { lag: 0.003, seed: 9 };
        s.cost.slowdown = vec![1.0, 1.7, 1.0, 1.2, 1.0, 1.0];
        let m = run_timed(&s, 6).unwrap();
        for (l, e) in m.clock.ledger.iter().zip(&m.clock.elapsed) {
            assert_eq!(l.total(), *e);
        }
    }

    #[test]
    fn time_policy_faster_column_takes_twice_the_steps() {
        let mut s = scenario(SyncPolicy::Time { tau_time: 0.4 }, SyncMode::Local);
        s.mesh = DeviceMesh::new(1, 2).unwrap();
        s.cost.slowdown = vec![1.0, 2.0];
        s.cost.alpha_shard = 0.0;
        let m = run_timed(&s, 3).unwrap();
        for r in &m.rounds {
            let (a, b) = (r.steps[0] as i64, r.steps[1] as i64);
            assert!((a - 2 * b).abs() <= 1, "{a} vs {b}");
        }
    }

    #[test]
    fn time_policy_wait_bound() {
        let mut s = scenario(SyncPolicy::Time { tau_time: 0.2 }, SyncMode::Local);
        s.cost.slowdown = vec![1.0, 2.0, 1.0, 1.0, 1.0, 1.0];
        s.injector = Injector::RandomStraggler { lag: 0.004, seed: 1 };
        let m = run_timed(&s, 20).unwrap();
        for r in &m.rounds {
            assert!(r.sync_waits.iter().all(|&w| w <= r.max_step));
        }
    }

    #[test]
    fn random_straggler_picks_one_worker_per_slot() {
        let inj = Injector::RandomStraggler { lag: 1.0, seed: 4 };
        for slot in 0..50 {
            let hit: f64 = (0..6).map(|w| inj.lag(w, slot, 6)).sum();
            assert_eq!(hit, 1.0);
        }
    }

    #[test]
    fn baseline_degrades_monotonically() {
        let mut prev = f64::INFINITY;
        for lag in [0.0, 0.001, 0.002, 0.004] {
            let mut s = scenario(SyncPolicy::Step { tau: 8 }, SyncMode::Synchronous);
            s.injector = Injector::ConsistentStraggler { lag, workers: vec![0] };
            let sps = run_timed(&s, 2).unwrap().samples_per_sec;
            assert!(sps <= prev);
            prev = sps;
        }
    }

    #[test]
    fn calibration_hits_fitted_targets() {
        let mut s = scenario(SyncPolicy::Step { tau: 8 }, SyncMode::Synchronous);
        s.cost.overlap = Overlap::Prefetch;
        let targets = CalibrationTargets {
            lag_retention: vec![(0.01, 0.7), (0.02, 0.55)],
            bandwidth_retention: (10, 0.5),
            tolerance: 0.5,
        };
        let rep = calibrate(&s, &targets).unwrap();
        let (_, target, achieved) = *rep.lag_fit.last().unwrap();
        assert!((achieved - target).abs() < 1e-6);
        assert!((rep.bandwidth_fit.2 - 0.5).abs() < 1e-6);
    }

    #[test]
    fn infeasible_calibration_is_reported() {
        let s = scenario(SyncPolicy::Step { tau: 8 }, SyncMode::Synchronous);
        let targets = CalibrationTargets {
            lag_retention: vec![(0.01, 1.5)],
            bandwidth_retention: (10, 0.5),
            tolerance: 0.1,
        };
        assert!(matches!(calibrate(&s, &targets), Err(Error::Calibration(_))));
    }
}
