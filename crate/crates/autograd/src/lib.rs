//! Small reverse-mode automatic differentiation engine over `ndarray`.
//!
//! Every backward rule is written in terms of recorded ops, so gradients can
//! be differentiated again (`grad(.., create_graph = true)`). This is what lets
//! an attacker differentiate through a sampler whose steps themselves contain
//! input gradients of a classifier.

pub mod nn;
pub mod sparse;
mod var;

pub use sparse::SparseMap;
pub use var::{grad, no_grad, with_grad_enabled, Var};
