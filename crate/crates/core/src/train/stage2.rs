use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{check_finite, scalar, shuffled_batches, Decision, EarlyStopping, EVAL_BATCH};
use crate::dataset::SampleRecord;
use crate::diffusion::diffusion_loss;
use crate::error::{shape_err, Error, Result};
use crate::model::{image_batch, mask_batch, token_batch, FullModel, STAGE2_PREFIX};
use crate::nn::Adam;
use crate::text::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    /// Held-out MAE at every iteration, index 0 = before the first update.
    pub val_losses: Vec<f64>,
    pub train_losses: Vec<f64>,
    pub best_iteration: usize,
    pub best_val_loss: f64,
    /// Iteration at which early stopping fired, if it did.
    pub stopped_at: Option<usize>,
    pub warmup_iterations: usize,
    pub train_samples: usize,
    pub holdout_samples: usize,
}

/// Frozen per-sample inputs of the refinement head.
struct Cached {
    stack: Vec<Tensor>,
    estimates: Vec<Tensor>,
    p_it: Tensor,
    y: Tensor,
}

fn cache(model: &FullModel, samples: &[SampleRecord], vocab: &Vocabulary) -> Result<Vec<Cached>> {
    let dtype = model.store.dtype();
    let device = model.store.device();
    let levels = model.refiner.levels().to_vec();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&SampleRecord> = chunk.iter().collect();
        let images = image_batch(&refs, dtype, device)?;
        let masks = mask_batch(&refs, dtype, device)?;
        let tokens = token_batch(&refs, vocab, model.config.model.max_len);
        let s1 = model.stage1.forward(&images, &tokens)?;
        let x_t = model.noised(&images)?;
        let t = model.noise.t;
        let den = model.denoiser.forward(&x_t, &vec![t; refs.len()])?;
        let estimates = model.denoiser.level_estimates(&den, &model.schedule, t, &levels)?;
        for i in 0..refs.len() {
            let stack = levels
                .iter()
                .map(|&n| {
                    let lvl = s1.stack.levels.get(n).ok_or_else(|| shape_err!("no decoded level {n}"))?;
                    Ok(lvl.get(i)?.unsqueeze(0)?.detach())
                })
                .collect::<Result<Vec<_>>>()?;
            let est = estimates
                .iter()
                .map(|e| Ok(e.get(i)?.unsqueeze(0)?.detach()))
                .collect::<Result<Vec<_>>>()?;
            out.push(Cached {
                stack,
                estimates: est,
                p_it: s1.prob.get(i)?.unsqueeze(0)?.detach(),
                y: masks.get(i)?.unsqueeze(0)?,
            });
        }
    }
    Ok(out)
}

fn cat_batch(items: &[&Cached]) -> Result<(Vec<Tensor>, Vec<Tensor>, Tensor, Tensor)> {
    let levels = items[0].stack.len();
    let join = |f: &dyn Fn(&Cached) -> &Tensor| -> Result<Tensor> {
        let ts: Vec<&Tensor> = items.iter().map(|c| f(c)).collect();
        Ok(Tensor::cat(&ts, 0)?)
    };
    let stack = (0..levels).map(|l| join(&|c| &c.stack[l])).collect::<Result<Vec<_>>>()?;
    let est = (0..levels).map(|l| join(&|c| &c.estimates[l])).collect::<Result<Vec<_>>>()?;
    Ok((stack, est, join(&|c| &c.p_it)?, join(&|c| &c.y)?))
}

fn holdout_loss(model: &FullModel, holdout: &[Cached]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in holdout.chunks(EVAL_BATCH) {
        let refs: Vec<&Cached> = chunk.iter().collect();
        let (stack, est, p_it, y) = cat_batch(&refs)?;
        let h = model.refiner.fuse(&stack, &est)?;
        let p = model.refiner.refine(&h, &p_it, false)?;
        total += scalar(&diffusion_loss(&p, &y)?)? * refs.len() as f64;
    }
    Ok(total / holdout.len() as f64)
}

/// Trains the refinement head (level projections, FC and BN) with MAE while
/// stage 1 and the denoiser stay frozen. The tail of `samples` is held out
/// for early stopping; the weights with the lowest held-out loss are kept.
pub fn train_stage2(model: &FullModel, samples: &[SampleRecord], vocab: &Vocabulary) -> Result<(Stage2Report, Adam)> {
    let cfg = &model.config.stage2;
    if samples.len() < 2 {
        return Err(Error::InvalidInput("stage 2 needs at least two samples".into()));
    }
    let holdout_n = ((samples.len() as f64 * cfg.holdout_fraction).round() as usize).clamp(1, samples.len() - 1);
    let cached = cache(model, samples, vocab)?;
    let (train, holdout) = cached.split_at(samples.len() - holdout_n);

    let mut adam = Adam::new(model.store.trainable(&[STAGE2_PREFIX]), cfg.optim().adam())?;
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let mut stopper = EarlyStopping::new(cfg.patience, warmup);

    let initial = holdout_loss(model, holdout)?;
    stopper.observe(0, initial);
    let mut best_snapshot = model.store.tensors(STAGE2_PREFIX)?;
    let mut report = Stage2Report {
        val_losses: vec![initial],
        train_losses: Vec::new(),
        best_iteration: 0,
        best_val_loss: initial,
        stopped_at: None,
        warmup_iterations: warmup,
        train_samples: train.len(),
        holdout_samples: holdout.len(),
    };

    'epochs: for epoch in 1..=cfg.epochs {
        let seed = model.config.seed.wrapping_mul(0x5851_F42D).wrapping_add(epoch as u64);
        for batch in shuffled_batches(train.len(), cfg.batch_size, seed) {
            let refs: Vec<&Cached> = batch.iter().map(|&i| &train[i]).collect();
            let (stack, est, p_it, y) = cat_batch(&refs)?;
            let h = model.refiner.fuse(&stack, &est)?;
            let p = model.refiner.refine(&h, &p_it, true)?;
            let loss = diffusion_loss(&p, &y)?;
            let value = scalar(&loss)?;
            check_finite(value, "stage-2", adam.step_count())?;
            adam.backward_step(&loss)?;
            report.train_losses.push(value);

            let iteration = adam.step_count();
            let val = holdout_loss(model, holdout)?;
            report.val_losses.push(val);
            let (improved, decision) = stopper.observe(iteration, val);
            if improved {
                best_snapshot = model.store.tensors(STAGE2_PREFIX)?;
                report.best_iteration = iteration;
                report.best_val_loss = val;
            }
            if decision == Decision::Stop {
                report.stopped_at = Some(iteration);
                log::info!("stage2 early stop at iteration {iteration} (best {})", report.best_iteration);
                break 'epochs;
            }
        }
        log::info!(
            "stage2 epoch {epoch}/{} held-out MAE {:.4} (best {:.4} at {})",
            cfg.epochs,
            report.val_losses.last().unwrap(),
            report.best_val_loss,
            report.best_iteration
        );
    }
    for (name, t) in &best_snapshot {
        model.store.set(name, t)?;
    }
    Ok((report, adam))
}
