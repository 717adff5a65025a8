use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_finite, scalar, shuffled_batches};
use crate::dataset::SampleRecord;
use crate::diffusion::{noise_prediction_loss, standard_normal};
use crate::error::{Error, Result};
use crate::model::{image_batch, to_signed, FullModel, DDPM_PREFIX};
use crate::nn::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdpmReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Trains the noise predictor on random `(x0, t, eps)` with the mean squared
/// noise-prediction error.
pub fn train_denoiser(model: &FullModel, images: &[SampleRecord]) -> Result<(DdpmReport, Adam)> {
    if images.is_empty() {
        return Err(Error::InvalidInput("denoiser training set is empty".into()));
    }
    let cfg = &model.config;
    let dcfg = &cfg.diffusion;
    let mut adam = Adam::new(model.store.trainable(&[DDPM_PREFIX]), dcfg.optim().adam())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD1FF);
    let dtype = model.store.dtype();
    let device = model.store.device();
    let mut report = DdpmReport {
        epoch_losses: Vec::new(),
        steps: 0,
    };
    for epoch in 1..=dcfg.epochs {
        let mut total = 0.0;
        let mut batches = 0;
        for batch in shuffled_batches(images.len(), dcfg.batch_size, rng.random()) {
            let refs: Vec<&SampleRecord> = batch.iter().map(|&i| &images[i]).collect();
            let x0 = to_signed(&image_batch(&refs, dtype, device)?)?;
            let steps: Vec<usize> = (0..refs.len()).map(|_| rng.random_range(1..=dcfg.steps)).collect();
            let eps = standard_normal(x0.dims(), dtype, device, &mut rng)?;
            let x_t = refs
                .iter()
                .enumerate()
                .map(|(i, _)| model.schedule.forward_noise(&x0.get(i)?, steps[i], &eps.get(i)?))
                .collect::<Result<Vec<_>>>()?;
            let x_t = candle_core::Tensor::stack(&x_t, 0)?;
            let out = model.denoiser.forward(&x_t, &steps)?;
            let loss = noise_prediction_loss(&out.eps, &eps)?;
            let value = scalar(&loss)?;
            check_finite(value, "denoiser", adam.step_count())?;
            adam.backward_step(&loss)?;
            total += value;
            batches += 1;
        }
        report.epoch_losses.push(total / batches as f64);
        report.steps = adam.step_count();
        log::info!("ddpm epoch {epoch}/{} loss {:.4}", dcfg.epochs, total / batches as f64);
    }
    Ok((report, adam))
}
