//! Stage two: forward noising, a small noise-prediction UNet, per-level
//! feature extraction and the residual probability refinement head.

mod denoiser;
mod refiner;
mod schedule;

pub use denoiser::{noise_prediction_loss, timestep_embedding, Denoiser, DenoiserConfig, DenoiserOutput};
pub use refiner::{diffusion_loss, fused_channels, RefinementHead};
pub use schedule::{standard_normal, NoiseSchedule};

use candle_core::Tensor;

use crate::error::{shape_err, Result};
use crate::head::DecodedFeatureStack;

/// Runs the denoiser on `x_t` at step `t` and fuses its level estimates with
/// the decoded stage-1 features into `H_seg`.
pub fn extract_and_fuse(
    x_t: &Tensor,
    t: usize,
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    stack: &DecodedFeatureStack,
    head: &RefinementHead,
) -> Result<Tensor> {
    let b = x_t.dim(0)?;
    let out = denoiser.forward(x_t, &vec![t; b])?;
    let estimates = denoiser.level_estimates(&out, schedule, t, head.levels())?;
    let selected = head
        .levels()
        .iter()
        .map(|&n| {
            stack
                .levels
                .get(n)
                .cloned()
                .ok_or_else(|| shape_err!("decoded stack has no level {n}"))
        })
        .collect::<Result<Vec<_>>>()?;
    head.fuse(&selected, &estimates)
}
