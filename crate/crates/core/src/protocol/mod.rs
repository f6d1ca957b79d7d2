//! Local-SGD training engine with layer-wise synchronization and the
//! pseudo-gradient penalty.

pub mod config;
pub mod engine;
pub mod penalty;
pub mod theorem;

pub use config::{make_protocol, PenaltyConfig, ProtocolKind, SyncConfig};
pub use engine::{CarryState, Engine, EngineConfig, RoundReport, SyncSummary};
pub use penalty::{
    clip_coefficient, clip_pseudo, ema_update, is_anomaly, penalty_weights, uniform_weights, EmaStat,
    PenaltyOutcome, SyncStats,
};
pub use theorem::{seed_mean_of_min, theorem_bound, TheoremParams};
