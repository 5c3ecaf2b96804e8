//! Nonparametric dynamical clustering of time-series segments.
//!
//! Each cluster is a Gaussian-process morphology that drifts through a
//! linear dynamical system; segments are aligned with monotone time warps
//! and assigned through a hierarchical Dirichlet process.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gp;
pub mod hdp;
pub mod inference;
pub mod io;
pub mod kernel;
pub mod lds;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod respiration;
pub mod segment;
pub mod serde_mat;
pub mod synth;
pub mod warp;

pub use error::{Error, Result};
pub use inference::{fit_offline, fit_online, InferenceConfig, ModelState};
pub use segment::Segment;
