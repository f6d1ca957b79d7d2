//! Inner and outer optimizers plus learning-rate schedules.
//!
//! Pseudo-gradients are stored as displacements `θ_{t,τ} − θ_t`, so the
//! outer optimizer moves the anchor *along* them: plain outer SGD with
//! `ν = 1` reduces to replacing the anchor with the averaged parameters.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::math::Vector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InnerOptConfig {
    Sgd {
        lr: f64,
    },
    Adamw {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl InnerOptConfig {
    pub fn adamw(lr: f64) -> Self {
        InnerOptConfig::Adamw {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            weight_decay: 0.0,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            InnerOptConfig::Sgd { lr } | InnerOptConfig::Adamw { lr, .. } => lr,
        }
    }

    pub fn with_lr(mut self, new_lr: f64) -> Self {
        match &mut self {
            InnerOptConfig::Sgd { lr } | InnerOptConfig::Adamw { lr, .. } => *lr = new_lr,
        }
        self
    }
}

/// Per-shard inner optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerOptState {
    pub config: InnerOptConfig,
    pub step: u64,
    first_moment: Vector,
    second_moment: Vector,
}

impl InnerOptState {
    pub fn new(config: InnerOptConfig, len: usize) -> Self {
        let moment_len = match config {
            InnerOptConfig::Sgd { .. } => 0,
            InnerOptConfig::Adamw { .. } => len,
        };
        Self {
            config,
            step: 0,
            first_moment: Vector::zeros(moment_len),
            second_moment: Vector::zeros(moment_len),
        }
    }

    pub fn moments(&self) -> (&Vector, &Vector) {
        (&self.first_moment, &self.second_moment)
    }

    /// Computes the descent displacement `u` for one step, so the new
    /// parameters are `θ − u`, and advances the state.
    pub fn update(&mut self, params: &Vector, grad: &Vector, lr: f64) -> Result<Vector> {
        check_len("inner_step", params.len(), grad.len())?;
        if !grad.is_finite() {
            return Err(Error::Numeric("inner_step gradient"));
        }
        let u = match self.config {
            InnerOptConfig::Sgd { .. } => grad.scaled(lr),
            InnerOptConfig::Adamw {
                beta1,
                beta2,
                eps,
                weight_decay,
                ..
            } => {
                check_len("inner_step moments", self.first_moment.len(), grad.len())?;
                let t = (self.step + 1) as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let m = self.first_moment.as_mut_slice();
                let v = self.second_moment.as_mut_slice();
                let mut u = Vec::with_capacity(grad.len());
                for i in 0..grad.len() {
                    let g = grad[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    u.push(lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * params[i]));
                }
                Vector::from_vec(u)
            }
        };
        self.step += 1;
        Ok(u)
    }
}

/// Applies one inner step in place.
pub fn inner_step(state: &mut InnerOptState, params: &mut Vector, grad: &Vector, lr: f64) -> Result<()> {
    let u = state.update(params, grad, lr)?;
    params.axpy_in_place(-1.0, &u)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OuterOptConfig {
    Sgd { lr: f64 },
    Nesterov { lr: f64, momentum: f64 },
}

impl OuterOptConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OuterOptConfig::Sgd { lr } | OuterOptConfig::Nesterov { lr, .. } => lr,
        }
    }
}

/// Per-shard outer optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterOptState {
    pub config: OuterOptConfig,
    pub momentum: Vector,
}

impl OuterOptState {
    pub fn new(config: OuterOptConfig, len: usize) -> Self {
        Self {
            config,
            momentum: Vector::zeros(len),
        }
    }

    /// `sgd`:      anchor += ν·Δ̂
    /// `nesterov`: m = μ·m + Δ̂;  anchor += ν·(μ·m + Δ̂)
    pub fn step(&mut self, anchor: &mut Vector, pseudo_grad: &Vector) -> Result<()> {
        check_len("outer_step", anchor.len(), pseudo_grad.len())?;
        match self.config {
            OuterOptConfig::Sgd { lr } => anchor.axpy_in_place(lr, pseudo_grad),
            OuterOptConfig::Nesterov { lr, momentum } => {
                check_len("outer_step momentum", self.momentum.len(), pseudo_grad.len())?;
                let m = self.momentum.as_mut_slice();
                let a = anchor.as_mut_slice();
                for i in 0..a.len() {
                    m[i] = momentum * m[i] + pseudo_grad[i];
                    a[i] += lr * (momentum * m[i] + pseudo_grad[i]);
                }
                Ok(())
            }
        }
    }
}

pub fn outer_step(state: &mut OuterOptState, anchor: &mut Vector, pseudo_grad: &Vector) -> Result<()> {
    state.step(anchor, pseudo_grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Constant,
    Cosine,
    InvSqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    /// Total inner steps (cosine only).
    #[serde(default)]
    pub total_steps: u64,
    /// Linear warmup steps (cosine only).
    #[serde(default)]
    pub warmup_steps: u64,
}

impl LrSchedule {
    pub fn constant(base_lr: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            base_lr,
            total_steps: 0,
            warmup_steps: 0,
        }
    }

    pub fn inv_sqrt(base_lr: f64) -> Self {
        Self {
            kind: ScheduleKind::InvSqrt,
            ..Self::constant(base_lr)
        }
    }

    pub fn cosine(base_lr: f64, total_steps: u64, warmup_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            base_lr,
            total_steps,
            warmup_steps,
        }
    }

    /// Learning rate at global inner step `s = t·τ + p`.
    pub fn at_step(&self, s: u64) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.base_lr,
            ScheduleKind::InvSqrt => self.base_lr / ((s + 1) as f64).sqrt(),
            ScheduleKind::Cosine => {
                if s < self.warmup_steps {
                    return self.base_lr * (s + 1) as f64 / self.warmup_steps as f64;
                }
                let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
                // evaluated at the step midpoint so the last step stays positive
                let progress = ((s - self.warmup_steps) as f64 + 0.5) / span as f64;
                let progress = progress.min(1.0);
                0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

pub fn lr_at(schedule: &LrSchedule, t: u64, p: u64, tau: u64) -> f64 {
    schedule.at_step(t * tau + p)
}
