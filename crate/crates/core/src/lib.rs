//! Two-stage instruction-conditioned object segmentation.
//!
//! Stage one encodes an image and a multi-clause instruction with a
//! hierarchical crossmodal encoder (pixel-word attention plus a language gate)
//! and decodes a foreground probability map. Stage two noises the image,
//! reads per-level activations from a small denoising UNet, fuses them with
//! the stage-one decoder features and predicts a residual correction to the
//! probability map.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod head;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod text;
pub mod train;
pub mod types;

pub use error::{Error, Result};
