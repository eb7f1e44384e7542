//! Experiment orchestration for diffusion-based adversarial purification:
//! TOML configuration, per-cell seeding, the defense, sweep, adaptive,
//! corruption and quality experiments, reports, plots and the `distransfer`
//! command line.

pub mod artifacts;
pub mod checks;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod report;
pub mod rows;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
