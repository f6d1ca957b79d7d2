//! Single-process simulator for sharded Local-SGD training.
//!
//! The crate is split bottom-up:
//!
//! * [`math`]: flat `f64` vectors and a seeded, stream-addressable RNG.
//! * [`task`]: layered toy tasks (diagonal quadratic, small MLP) with exact
//!   gradients and per-worker data shards.
//! * [`optim`]: inner (SGD, AdamW) and outer (SGD, Nesterov) optimizers and
//!   learning-rate schedules.
//! * [`mesh`]: the M x N device mesh, uniform layer sharding and the
//!   in-memory collectives.
//! * [`protocol`]: the training engine, the synchronization procedure with
//!   pseudo-gradient penalty, protocol presets and the convergence bound.
//! * [`timing`]: discrete-event timing model (alpha-beta collectives,
//!   stragglers, limited bandwidth, step- and time-triggered sync).

pub mod error;
pub mod math;
pub mod mesh;
pub mod optim;
pub mod protocol;
pub mod task;
pub mod timing;

pub use error::{Error, Result};
pub use math::{Rng, Vector};
