//! Experiment configuration: one JSON document per experiment.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use edit_sim::mesh::DeviceMesh;
use edit_sim::optim::{InnerOptConfig, LrSchedule};
use edit_sim::protocol::{PenaltyConfig, ProtocolKind, SyncConfig};
use edit_sim::task::{CorruptionSchedule, TaskConfig};
use edit_sim::timing::{CalibrationTargets, CostModel, Injector, SyncMode, SyncPolicy, TimingScenario};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// A training protocol as run by the harness. `AEdit` is EDiT numerics under
/// the time-based sync policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Baseline,
    PostLocalSgd,
    Diloco,
    Edit,
    AEdit,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::AEdit => "a_edit",
            other => other.kind().name(),
        }
    }

    pub fn kind(&self) -> ProtocolKind {
        match self {
            Protocol::Baseline => ProtocolKind::Baseline,
            Protocol::PostLocalSgd => ProtocolKind::PostLocalSgd,
            Protocol::Diloco => ProtocolKind::Diloco,
            Protocol::Edit | Protocol::AEdit => ProtocolKind::Edit,
        }
    }

    pub fn sync_mode(&self) -> SyncMode {
        match self {
            Protocol::Baseline => SyncMode::Synchronous,
            _ => SyncMode::Local,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Protocol::Baseline),
            "post_local_sgd" => Ok(Protocol::PostLocalSgd),
            "diloco" => Ok(Protocol::Diloco),
            "edit" => Ok(Protocol::Edit),
            "a_edit" => Ok(Protocol::AEdit),
            other => Err(HarnessError::Config(format!("unknown protocol `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub rows: usize,
    pub cols: usize,
}

/// Penalty stages to switch off on top of the protocol's own settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    #[serde(default)]
    pub disable_anomaly_elimination: bool,
    #[serde(default)]
    pub disable_weighted_averaging: bool,
    #[serde(default)]
    pub disable_gradient_clip: bool,
}

impl Ablation {
    pub const ALL: Ablation = Ablation {
        disable_anomaly_elimination: true,
        disable_weighted_averaging: true,
        disable_gradient_clip: true,
    };

    pub fn apply(&self, mut p: PenaltyConfig) -> PenaltyConfig {
        p.anomaly_elimination &= !self.disable_anomaly_elimination;
        p.weighted_averaging &= !self.disable_weighted_averaging;
        p.gradient_clip &= !self.disable_gradient_clip;
        p
    }

    /// Short label in the usual ablation naming.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.disable_anomaly_elimination, "ae"),
            (self.disable_weighted_averaging, "wa"),
            (self.disable_gradient_clip, "gc"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        match parts.len() {
            0 => String::new(),
            3 => "wo_all".into(),
            _ => format!("wo_{}", parts.join("_")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingConfig {
    pub cost: CostModel,
    /// Parameters per layer for the timing model; defaults to the task's.
    #[serde(default)]
    pub layer_sizes: Option<Vec<usize>>,
    /// Each entry is a separate scenario in the run matrix.
    #[serde(default = "default_injectors")]
    pub injectors: Vec<Injector>,
    /// Sync interval in seconds for `a_edit`.
    #[serde(default = "default_tau_time")]
    pub tau_time: f64,
    /// Leading rounds timed as fully synchronous.
    #[serde(default)]
    pub warmup_rounds: u64,
}

fn default_injectors() -> Vec<Injector> {
    vec![Injector::None]
}

fn default_tau_time() -> f64 {
    600.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub lr_grid: Vec<f64>,
    pub workers: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub workers: usize,
    pub rounds: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElasticConfig {
    pub phases: Vec<Phase>,
}

/// Pass conditions for `run --check`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checks {
    #[serde(default)]
    pub max_final_val_loss: Option<f64>,
    #[serde(default)]
    pub min_retention: Option<f64>,
    /// Fail if any run failed (default true).
    #[serde(default = "yes")]
    pub no_failed_runs: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub task: TaskConfig,
    pub mesh: MeshConfig,
    #[serde(default = "default_protocols")]
    pub protocols: Vec<Protocol>,
    #[serde(default)]
    pub sync: SyncConfig,
    #[serde(default)]
    pub ablation: Ablation,
    pub inner: InnerOptConfig,
    /// Inner learning-rate schedule; constant at the inner lr when absent.
    #[serde(default)]
    pub schedule: Option<LrSchedule>,
    /// Outer rounds T.
    pub rounds: u64,
    /// Per-worker batch size.
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub corruption: Option<CorruptionSchedule>,
    #[serde(default)]
    pub track_true_grad: bool,
    #[serde(default)]
    pub timing: Option<TimingConfig>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub elastic: Option<ElasticConfig>,
    #[serde(default)]
    pub calibration: Option<CalibrationTargets>,
    #[serde(default)]
    pub checks: Option<Checks>,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_name() -> String {
    "run".into()
}

fn default_protocols() -> Vec<Protocol> {
    vec![Protocol::Edit]
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            HarnessError::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(HarnessError::Config(format!("{field}: {msg}")));
        if self.seeds.is_empty() {
            return bad("seeds", "must be non-empty");
        }
        if self.protocols.is_empty() {
            return bad("protocols", "must be non-empty");
        }
        if self.mesh.rows == 0 || self.mesh.cols == 0 {
            return bad("mesh", "rows and cols must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.rounds == 0 {
            return bad("rounds", "must be >= 1");
        }
        self.sync.validate().map_err(|e| HarnessError::Config(format!("sync: {e}")))?;
        self.task
            .build()
            .map_err(|e| HarnessError::Config(format!("task: {e}")))?;
        if let Some(t) = &self.timing {
            t.cost.validate().map_err(|e| HarnessError::Config(format!("timing.cost: {e}")))?;
            if t.injectors.is_empty() {
                return bad("timing.injectors", "must be non-empty");
            }
            for inj in &t.injectors {
                inj.validate()
                    .map_err(|e| HarnessError::Config(format!("timing.injectors: {e}")))?;
            }
            if !(t.tau_time > 0.0) {
                return bad("timing.tau_time", "must be > 0");
            }
        }
        if let Some(s) = &self.sweep {
            if s.lr_grid.is_empty() || s.workers.is_empty() {
                return bad("sweep", "lr_grid and workers must be non-empty");
            }
            if s.lr_grid.windows(2).any(|w| !(w[0] < w[1])) {
                return bad("sweep.lr_grid", "must be strictly increasing");
            }
            if s.lr_grid.iter().any(|lr| !(*lr > 0.0)) || s.workers.contains(&0) {
                return bad("sweep", "learning rates and worker counts must be positive");
            }
        }
        if let Some(e) = &self.elastic {
            if e.phases.is_empty() || e.phases.iter().any(|p| p.workers == 0 || p.rounds == 0) {
                return bad("elastic.phases", "need >= 1 phase with workers, rounds >= 1");
            }
        }
        Ok(())
    }

    pub fn device_mesh(&self) -> Result<DeviceMesh> {
        Ok(DeviceMesh::new(self.mesh.rows, self.mesh.cols)?)
    }

    pub fn schedule(&self) -> LrSchedule {
        self.schedule.unwrap_or_else(|| LrSchedule::constant(inner_lr(&self.inner)))
    }

    /// Sync settings for `protocol` with the ablation applied.
    pub fn sync_for(&self, protocol: Protocol) -> SyncConfig {
        let mut base = self.sync;
        base.penalty = self.ablation.apply(base.penalty);
        protocol.kind().configure(&base)
    }

    /// Timing scenario for one matrix cell.
    pub fn timing_scenario(&self, protocol: Protocol, injector: &Injector, layer_sizes: &[usize]) -> Option<TimingScenario> {
        let t = self.timing.as_ref()?;
        let tau = self.sync.tau;
        let policy = match protocol {
            Protocol::AEdit => SyncPolicy::Time { tau_time: t.tau_time },
            _ => SyncPolicy::Step { tau },
        };
        Some(TimingScenario {
            mesh: DeviceMesh::new(self.mesh.rows, self.mesh.cols).ok()?,
            layer_sizes: t.layer_sizes.clone().unwrap_or_else(|| layer_sizes.to_vec()),
            cost: t.cost.clone(),
            injector: injector.clone(),
            policy,
            mode: protocol.sync_mode(),
            batch_size: self.batch_size,
            warmup_rounds: t.warmup_rounds,
            tau,
        })
    }
}

pub fn inner_lr(inner: &InnerOptConfig) -> f64 {
    match *inner {
        InnerOptConfig::Sgd { lr } | InnerOptConfig::Adamw { lr, .. } => lr,
    }
}

pub fn with_inner_lr(inner: InnerOptConfig, new_lr: f64) -> InnerOptConfig {
    match inner {
        InnerOptConfig::Sgd { .. } => InnerOptConfig::Sgd { lr: new_lr },
        InnerOptConfig::Adamw {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } => InnerOptConfig::Adamw {
            lr: new_lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        },
    }
}

/// Scenario label and magnitude (lag seconds or repeat factor).
pub fn injector_label(inj: &Injector) -> (&'static str, f64) {
    match inj {
        Injector::None => ("clean", 0.0),
        Injector::RandomStraggler { lag, .. } => ("random_straggler", *lag),
        Injector::ConsistentStraggler { lag, .. } => ("consistent_straggler", *lag),
        Injector::LimitedBandwidth { repeat } => ("limited_bandwidth", *repeat as f64),
    }
}
