//! Training loops for both stages and the denoiser, plus batched inference
//! and split evaluation.

mod ddpm;
mod early_stop;
mod stage1;
mod stage2;

pub use ddpm::{train_denoiser, DdpmReport};
pub use early_stop::{Decision, EarlyStopping};
pub use stage1::{train_stage1, Stage1Report};
pub use stage2::{train_stage2, Stage2Report};

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SampleRecord;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalResult};
use crate::model::{image_batch, token_batch, FullModel};
use crate::text::Vocabulary;
use crate::types::{BinaryMask, ProbabilityMap, Stage};

/// Batch size used for inference passes.
pub const EVAL_BATCH: usize = 32;

/// Seeded permutation of `0..n` split into batches of `batch_size`.
pub fn shuffled_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

pub(crate) fn check_finite(loss: f64, what: &str, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Training(format!("{what} loss became {loss} at step {step}")));
    }
    Ok(())
}

fn maps_from_batch(prob: &Tensor, stage: Stage) -> Result<Vec<ProbabilityMap>> {
    (0..prob.dim(0)?)
        .map(|i| ProbabilityMap::from_tensor(&prob.get(i)?, stage))
        .collect()
}

/// Probability maps for every sample: stage 1 always, stage 2 when `diffusion` is set.
pub fn predict_maps(
    model: &FullModel,
    samples: &[SampleRecord],
    vocab: &Vocabulary,
    diffusion: bool,
) -> Result<(Vec<ProbabilityMap>, Option<Vec<ProbabilityMap>>)> {
    let dtype = model.store.dtype();
    let device = model.store.device();
    let mut p_it = Vec::with_capacity(samples.len());
    let mut p_diff = diffusion.then(Vec::new);
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&SampleRecord> = chunk.iter().collect();
        let images = image_batch(&refs, dtype, device)?;
        let tokens = token_batch(&refs, vocab, model.config.model.max_len);
        let (a, b) = model.predict(&images, &tokens, diffusion)?;
        p_it.extend(maps_from_batch(&a.detach(), Stage::Intermediate)?);
        if let (Some(out), Some(b)) = (p_diff.as_mut(), b) {
            out.extend(maps_from_batch(&b.detach(), Stage::Diffusion)?);
        }
    }
    Ok((p_it, p_diff))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEvaluation {
    pub ids: Vec<String>,
    pub stage1: EvalResult,
    pub stage2: Option<EvalResult>,
}

pub fn evaluate_split(
    model: &FullModel,
    samples: &[SampleRecord],
    vocab: &Vocabulary,
    diffusion: bool,
) -> Result<SplitEvaluation> {
    let gts: Vec<BinaryMask> = samples.iter().map(|s| s.mask().clone()).collect();
    let (p_it, p_diff) = predict_maps(model, samples, vocab, diffusion)?;
    let masks = |maps: &[ProbabilityMap]| maps.iter().map(ProbabilityMap::binarize).collect::<Vec<_>>();
    let stage1 = evaluate(&masks(&p_it), &gts)?;
    let stage2 = p_diff.map(|m| evaluate(&masks(&m), &gts)).transpose()?;
    Ok(SplitEvaluation {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        stage1,
        stage2,
    })
}
