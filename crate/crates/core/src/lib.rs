//! Diffusion-based adversarial purification with guided reverse sampling,
//! the attacks used to evaluate it, and randomized-smoothing certification.

pub mod attacks;
pub mod certification;
pub mod classifier;
pub mod datasets;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod metrics;
pub mod purifier;
pub mod rng;

pub use error::{Error, Result};
