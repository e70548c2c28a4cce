//! Motion-aware pseudo siamese head detection for indoor video.
//!
//! The pipeline takes consecutive frame pairs, estimates motion (absolute
//! frame difference by default, optical flow via a pluggable provider),
//! runs frame and motion streams through a pseudo siamese backbone,
//! aggregates shallow and deep features, and decodes head boxes with an
//! anchor-based detection head. On top of detection the crate provides
//! occupancy-counting metrics (NMAE / SCORE), AP50 evaluation, and an
//! adversarial-robustness harness (FGSM attacks, CAM heatmaps, the NI
//! index, and a small-perturbation threshold analysis).

pub mod aggregation;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod head;
pub mod manifest;
pub mod motion;
pub mod network;
pub mod nn;
pub mod robustness;
pub mod train;

pub use error::{MpsnError, Result};
