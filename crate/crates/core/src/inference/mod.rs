//! Variational inference: batch and streaming fits.

pub mod assign;
pub mod config;
pub mod engine;
pub mod offline;
pub mod online;
pub mod predict;
pub mod state;

pub use config::InferenceConfig;
pub use offline::fit_offline;
pub use online::{fit_online, OnlineFitter, SegmentReport};
pub use predict::{predict, Prediction};
pub use state::{ElboParts, FitMode, ModelState, Priors};
