use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::OuterOptConfig;

/// Which stages of the pseudo-gradient penalty are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    #[serde(default = "yes")]
    pub anomaly_elimination: bool,
    #[serde(default = "yes")]
    pub weighted_averaging: bool,
    #[serde(default = "yes")]
    pub gradient_clip: bool,
}

fn yes() -> bool {
    true
}

impl PenaltyConfig {
    pub const FULL: PenaltyConfig = PenaltyConfig {
        anomaly_elimination: true,
        weighted_averaging: true,
        gradient_clip: true,
    };

    /// Plain uniform averaging, no clip ("w/o ALL").
    pub const OFF: PenaltyConfig = PenaltyConfig {
        anomaly_elimination: false,
        weighted_averaging: false,
        gradient_clip: false,
    };

    pub fn is_off(&self) -> bool {
        *self == Self::OFF
    }
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self::FULL
    }
}

/// Synchronization settings shared by every local-SGD protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncConfig {
    /// Inner steps per round.
    #[serde(default = "default_tau")]
    pub tau: u64,
    /// Steps `s = t·τ + p` with `s <= t_warm` run fully synchronous.
    /// `u64::MAX` never leaves warmup.
    #[serde(default)]
    pub t_warm: u64,
    /// z-score threshold.
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// EMA coefficient.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Clip threshold on the synchronized pseudo-gradient norm.
    #[serde(default = "default_phi")]
    pub phi: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Syncs observed before anomaly flagging switches on.
    #[serde(default = "default_ema_warmup")]
    pub ema_warmup_rounds: u64,
    #[serde(default)]
    pub penalty: PenaltyConfig,
    #[serde(default = "default_outer")]
    pub outer: OuterOptConfig,
}

fn default_tau() -> u64 {
    128
}
fn default_delta() -> f64 {
    3.0
}
fn default_alpha() -> f64 {
    0.02
}
fn default_phi() -> f64 {
    10.0
}
fn default_eps() -> f64 {
    1e-6
}
fn default_ema_warmup() -> u64 {
    10
}
fn default_outer() -> OuterOptConfig {
    OuterOptConfig::Nesterov {
        lr: 0.8,
        momentum: 0.85,
    }
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            tau: default_tau(),
            t_warm: 0,
            delta: default_delta(),
            alpha: default_alpha(),
            phi: default_phi(),
            eps: default_eps(),
            ema_warmup_rounds: default_ema_warmup(),
            penalty: PenaltyConfig::FULL,
            outer: default_outer(),
        }
    }
}

impl SyncConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::Config("tau must be >= 1".into()));
        }
        if !(self.phi > 0.0) {
            return Err(Error::Config("phi must be > 0".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be > 0".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config("alpha must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn is_warmup_step(&self, s: u64) -> bool {
        s <= self.t_warm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    /// Synchronous mini-batch data parallel.
    Baseline,
    /// Warmup, then uniform averaging with outer SGD (ν = 1).
    PostLocalSgd,
    /// Nesterov outer step on uniformly averaged pseudo-gradients.
    Diloco,
    /// Nesterov outer step with the full pseudo-gradient penalty.
    Edit,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 4] = [
        ProtocolKind::Baseline,
        ProtocolKind::PostLocalSgd,
        ProtocolKind::Diloco,
        ProtocolKind::Edit,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ProtocolKind::Baseline => "baseline",
            ProtocolKind::PostLocalSgd => "post_local_sgd",
            ProtocolKind::Diloco => "diloco",
            ProtocolKind::Edit => "edit",
        }
    }

    /// Overrides the protocol-defining fields of `base`.
    pub fn configure(&self, base: &SyncConfig) -> SyncConfig {
        let mut cfg = *base;
        match self {
            ProtocolKind::Baseline => {
                cfg.t_warm = u64::MAX;
                cfg.penalty = PenaltyConfig::OFF;
            }
            ProtocolKind::PostLocalSgd => {
                cfg.penalty = PenaltyConfig::OFF;
                cfg.outer = OuterOptConfig::Sgd { lr: 1.0 };
            }
            ProtocolKind::Diloco => {
                cfg.penalty = PenaltyConfig::OFF;
                if let OuterOptConfig::Sgd { .. } = cfg.outer {
                    cfg.outer = default_outer();
                }
            }
            // base is taken as-is so ablated configs can collapse onto the others
            ProtocolKind::Edit => {}
        }
        cfg
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProtocolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProtocolKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown protocol '{s}'")))
    }
}

/// Sync configuration for the named protocol, derived from `base`.
pub fn make_protocol(name: &str, base: &SyncConfig) -> Result<SyncConfig> {
    Ok(name.parse::<ProtocolKind>()?.configure(base))
}
