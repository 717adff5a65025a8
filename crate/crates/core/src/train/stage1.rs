use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{check_finite, evaluate_split, scalar, shuffled_batches};
use crate::dataset::SampleRecord;
use crate::error::{Error, Result};
use crate::head::intermediate_loss;
use crate::model::{image_batch, mask_batch, token_batch, FullModel, STAGE1_PREFIX};
use crate::nn::Adam;
use crate::text::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Validation mIoU after each epoch; index 0 is the initialization.
    pub val_miou: Vec<f64>,
    /// Epoch whose weights were kept (0 = initialization).
    pub best_epoch: usize,
    pub best_val_miou: Option<f64>,
    pub steps: usize,
}

impl Stage1Report {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

fn restore(model: &FullModel, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
    for (name, t) in snapshot {
        model.store.set(name, t)?;
    }
    Ok(())
}

/// Trains the text encoder, multimodal encoder and segmentation head with
/// cross-entropy and AdamW. When `val` is non-empty, the weights with the
/// best validation mIoU (initialization included) are kept.
pub fn train_stage1(
    model: &FullModel,
    train: &[SampleRecord],
    val: &[SampleRecord],
    vocab: &Vocabulary,
) -> Result<(Stage1Report, Adam)> {
    if train.is_empty() {
        return Err(Error::InvalidInput("stage-1 training set is empty".into()));
    }
    let cfg = &model.config;
    let opt_cfg = &cfg.stage1;
    let mut adam = Adam::new(model.store.trainable(&[STAGE1_PREFIX]), opt_cfg.adam())?;
    let dtype = model.store.dtype();
    let device = model.store.device();

    let mut report = Stage1Report {
        epoch_losses: Vec::new(),
        val_miou: Vec::new(),
        best_epoch: 0,
        best_val_miou: None,
        steps: 0,
    };
    let mut best_snapshot = None;
    let mut track = |epoch: usize, report: &mut Stage1Report| -> Result<()> {
        if val.is_empty() {
            return Ok(());
        }
        let miou = evaluate_split(model, val, vocab, false)?.stage1.miou;
        report.val_miou.push(miou);
        if report.best_val_miou.map_or(true, |b| miou > b) {
            report.best_val_miou = Some(miou);
            report.best_epoch = epoch;
            best_snapshot = Some(model.store.tensors(STAGE1_PREFIX)?);
        }
        Ok(())
    };
    if opt_cfg.epochs > 0 {
        track(0, &mut report)?;
    }

    for epoch in 1..=opt_cfg.epochs {
        let seed = cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(epoch as u64);
        let mut total = 0.0;
        let mut count = 0;
        for batch in shuffled_batches(train.len(), opt_cfg.batch_size, seed) {
            let refs: Vec<&SampleRecord> = batch.iter().map(|&i| &train[i]).collect();
            let images = image_batch(&refs, dtype, device)?;
            let masks = mask_batch(&refs, dtype, device)?;
            let tokens = token_batch(&refs, vocab, cfg.model.max_len);
            let out = model.stage1.forward(&images, &tokens)?;
            let loss = intermediate_loss(&out.prob, &masks)?;
            let value = scalar(&loss)?;
            check_finite(value, "stage-1", adam.step_count())?;
            adam.backward_step(&loss)?;
            total += value * refs.len() as f64;
            count += refs.len();
        }
        report.steps = adam.step_count();
        report.epoch_losses.push(total / count as f64);
        track(epoch, &mut report)?;
        log::info!(
            "stage1 epoch {epoch}/{} loss {:.4} val mIoU {}",
            opt_cfg.epochs,
            total / count as f64,
            report.val_miou.last().map_or("-".into(), |m| format!("{m:.4}"))
        );
    }
    if let Some(snapshot) = best_snapshot {
        restore(model, &snapshot)?;
    }
    Ok((report, adam))
}
