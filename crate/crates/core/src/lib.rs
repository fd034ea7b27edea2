//! Glass-surface segmentation at desk scale.
//!
//! The crate covers the full loop: a deterministic procedural stand-in for a
//! diffusion-based synthetic-data pipeline, a compact query-based
//! segmentation model (patch encoder, simple feature pyramid, confidence-based
//! query selection, mask decoder), the matched set-prediction training
//! objective, the IoU / F-beta / MAE / BER evaluation quartet, and a
//! reproducible trainer.

pub mod autodiff;
pub mod data;
pub mod dqs;
pub mod encoder;
pub mod config;
pub mod error;
pub mod nn;
pub mod pyramid;
pub mod synth;
pub mod util;

pub use config::{LossWeights, RunConfig, SelectionSource};
pub use error::{Error, Result};
