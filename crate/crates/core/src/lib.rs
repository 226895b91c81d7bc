//! Occurrence-map-weighted prototype learning for interpretable multi-label
//! image diagnosis, with Patch/GAP baselines, a four-stage training cycle
//! (warm-up, joint, projection, head) plus pruning, a synthetic
//! planted-signal dataset, NIH-format ingestion, AUC evaluation, and
//! global/local explanation rendering.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod trainer;
pub mod transform;

pub use error::{Error, Result};
