//! Experiment harness for the EDiT simulator: JSON configs, run matrices,
//! learning-rate sweeps, elastic chains, reports and calibration.

pub mod config;
pub mod elastic;
pub mod error;
pub mod metrics;
pub mod report;
pub mod runner;
pub mod sweep;

pub use config::{ExperimentConfig, Protocol};
pub use error::{HarnessError, Result};
pub use runner::{run_experiment, write_outputs, ExperimentResult, RunOutput};
