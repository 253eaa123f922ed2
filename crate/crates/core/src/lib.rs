//! Trajectory-optimized task weighting for meta-learning.
//!
//! Meta-training is treated as a discrete-time control problem: the
//! meta-parameters are the state, per-task weights are the actions, one
//! optimizer step is the transition. Task weights are chosen by iterative LQR
//! over a short horizon of pre-sampled task batches.

pub mod autodiff;
pub mod cost;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod ilqr;
pub mod linalg;
pub mod metalearn;
pub mod model;
pub mod tasks;
pub mod weighting;

pub use error::{Error, Result};
