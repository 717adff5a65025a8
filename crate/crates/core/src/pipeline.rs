//! File-level entry points behind the command-line verbs: each reads its
//! inputs from disk, runs one step and writes a checkpoint or report.

use std::fs;
use std::path::Path;

use candle_core::DType;

use crate::checkpoint::{self, TrainState};
use crate::config::RunConfig;
use crate::dataset::{Dataset, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::metrics::{error_report, save_iou_histogram, ErrorReport};
use crate::model::{FullModel, DDPM_PREFIX, STAGE1_PREFIX};
use crate::text::{tokenize, words, Vocabulary};
use crate::train::{self, DdpmReport, SplitEvaluation, Stage1Report, Stage2Report};
use crate::types::{BinaryMask, Image, ProbabilityMap, Stage};

pub const EVAL_FILE: &str = "eval.json";
pub const REPORT_FILE: &str = "report.txt";
pub const HISTOGRAM_FILE: &str = "iou_histogram.png";

fn load_split(data_dir: &Path, split: Split) -> Result<Vec<SampleRecord>> {
    Ok(Dataset::load_split(data_dir, split)?.1)
}

fn load_vocab(data_dir: &Path) -> Result<Vocabulary> {
    Vocabulary::load(&data_dir.join("vocab.txt"))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Trains stage 1 on the train split with validation-mIoU model selection.
pub fn run_stage1(config: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<Stage1Report> {
    let vocab = load_vocab(data_dir)?;
    let train_set = load_split(data_dir, Split::Train)?;
    let val_set = load_split(data_dir, Split::Val)?;
    let model = FullModel::new(config, vocab.len(), DType::F32)?;
    let (report, adam) = train::train_stage1(&model, &train_set, &val_set, &vocab)?;
    let state = TrainState {
        stage: "stage1".into(),
        epoch: config.stage1.epochs,
        iteration: adam.step_count(),
        optimizer_steps: adam.step_count(),
        best_value: report.best_val_miou,
        best_iteration: Some(report.best_epoch),
        final_loss: report.final_loss(),
        weights_prefix: STAGE1_PREFIX.into(),
    };
    checkpoint::save(out_dir, &model.store, Some(&adam), config, &state, &vocab)?;
    write_json(&out_dir.join("report.json"), &report)?;
    Ok(report)
}

/// Trains the denoiser on the train-split images.
pub fn run_ddpm(config: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<DdpmReport> {
    let vocab = load_vocab(data_dir)?;
    let train_set = load_split(data_dir, Split::Train)?;
    let model = FullModel::new(config, vocab.len(), DType::F32)?;
    let (report, adam) = train::train_denoiser(&model, &train_set)?;
    let state = TrainState {
        stage: "ddpm".into(),
        epoch: config.diffusion.epochs,
        iteration: adam.step_count(),
        optimizer_steps: adam.step_count(),
        final_loss: report.epoch_losses.last().copied(),
        weights_prefix: DDPM_PREFIX.into(),
        ..Default::default()
    };
    checkpoint::save(out_dir, &model.store, Some(&adam), config, &state, &vocab)?;
    write_json(&out_dir.join("report.json"), &report)?;
    Ok(report)
}

/// Combines the architecture recorded in the stage-1 and denoiser checkpoints
/// with the stage-2 settings of `config`.
pub fn stage2_config(config: &RunConfig, stage1_dir: &Path, ddpm_dir: &Path) -> Result<RunConfig> {
    let s1 = checkpoint::load_config(stage1_dir)?;
    let dd = checkpoint::load_config(ddpm_dir)?;
    let mut merged = config.clone();
    merged.model = s1.model;
    merged.stage1 = s1.stage1;
    let (t_infer, noise_seed) = (config.diffusion.t_infer, config.diffusion.noise_seed);
    merged.diffusion = dd.diffusion;
    merged.diffusion.t_infer = t_infer;
    merged.diffusion.noise_seed = noise_seed;
    merged.validate()?;
    Ok(merged)
}

/// Trains the refinement head on the val split with stage 1 and the denoiser frozen.
pub fn run_stage2(
    config: &RunConfig,
    data_dir: &Path,
    stage1_dir: &Path,
    ddpm_dir: &Path,
    out_dir: &Path,
) -> Result<Stage2Report> {
    let config = stage2_config(config, stage1_dir, ddpm_dir)?;
    let vocab = checkpoint::load_vocab(stage1_dir)?;
    if vocab != load_vocab(data_dir)? {
        return Err(Error::Config("stage-1 checkpoint was trained with a different vocabulary".into()));
    }
    let val_set = load_split(data_dir, Split::Val)?;
    let model = FullModel::new(&config, vocab.len(), DType::F32)?;
    checkpoint::load_weights(stage1_dir, &model.store, STAGE1_PREFIX)?;
    checkpoint::load_weights(ddpm_dir, &model.store, DDPM_PREFIX)?;
    let (report, adam) = train::train_stage2(&model, &val_set, &vocab)?;
    let state = TrainState {
        stage: "stage2".into(),
        epoch: config.stage2.epochs,
        iteration: report.val_losses.len() - 1,
        optimizer_steps: adam.step_count(),
        best_value: Some(report.best_val_loss),
        best_iteration: Some(report.best_iteration),
        final_loss: report.train_losses.last().copied(),
        weights_prefix: String::new(),
    };
    checkpoint::save(out_dir, &model.store, Some(&adam), &config, &state, &vocab)?;
    write_json(&out_dir.join("report.json"), &report)?;
    Ok(report)
}

/// Rebuilds a model from a checkpoint directory. Stage-2 checkpoints enable
/// the refinement path.
pub fn load_model(ckpt_dir: &Path) -> Result<(FullModel, Vocabulary, bool)> {
    let config = checkpoint::load_config(ckpt_dir)?;
    let state = checkpoint::load_state(ckpt_dir)?;
    let vocab = checkpoint::load_vocab(ckpt_dir)?;
    let model = FullModel::new(&config, vocab.len(), DType::F32)?;
    let diffusion = state.stage == "stage2";
    let required = if diffusion { "" } else { STAGE1_PREFIX };
    checkpoint::load_weights(ckpt_dir, &model.store, required)?;
    Ok((model, vocab, diffusion))
}

/// Evaluates a checkpoint on one split and writes `eval.json`, per-sample IoU
/// tables, a summary and an IoU histogram into `out_dir`.
pub fn run_eval(ckpt_dir: &Path, data_dir: &Path, split: Split, out_dir: &Path, diffusion: bool) -> Result<SplitEvaluation> {
    let (model, vocab, has_stage2) = load_model(ckpt_dir)?;
    if diffusion && !has_stage2 {
        return Err(Error::Config(format!(
            "{} is not a stage-2 checkpoint; pass --no-diffusion",
            ckpt_dir.display()
        )));
    }
    let samples = load_split(data_dir, split)?;
    let result = train::evaluate_split(&model, &samples, &vocab, diffusion)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_json(&out_dir.join(EVAL_FILE), &result)?;
    let mut summary = format!("stage 1\n{}", result.stage1.summary());
    let table = out_dir.join("iou_stage1.csv");
    fs::write(&table, result.stage1.iou_table(&result.ids)?).map_err(|e| Error::io(&table, e))?;
    let mut last = &result.stage1;
    if let Some(s2) = &result.stage2 {
        summary.push_str(&format!("\nstage 2\n{}", s2.summary()));
        let table = out_dir.join("iou_stage2.csv");
        fs::write(&table, s2.iou_table(&result.ids)?).map_err(|e| Error::io(&table, e))?;
        last = s2;
    }
    let sp = out_dir.join("summary.txt");
    fs::write(&sp, &summary).map_err(|e| Error::io(&sp, e))?;
    save_iou_histogram(&last.ious, 10, &out_dir.join(HISTOGRAM_FILE))?;
    Ok(result)
}

/// Worst-N listing for the final stage of a stored evaluation.
pub fn run_report(eval_dir: &Path, worst_n: usize) -> Result<ErrorReport> {
    let p = eval_dir.join(EVAL_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let eval: SplitEvaluation = serde_json::from_str(&text)?;
    let result = eval.stage2.as_ref().unwrap_or(&eval.stage1);
    let report = error_report(result, &eval.ids, worst_n)?;
    let rp = eval_dir.join(REPORT_FILE);
    fs::write(&rp, report.to_text()).map_err(|e| Error::io(&rp, e))?;
    write_json(&eval_dir.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub p_it: ProbabilityMap,
    pub p_diff: Option<ProbabilityMap>,
    /// Binarized final-stage map.
    pub mask: BinaryMask,
    pub truncated: bool,
}

/// Segments the object an instruction refers to in one image.
pub fn infer(model: &FullModel, vocab: &Vocabulary, image: &Image, instruction: &str, diffusion: bool) -> Result<Inference> {
    let size = model.config.model.image_size;
    if image.height != size || image.width != size {
        return Err(Error::InvalidInput(format!(
            "image is {}x{}, model expects {size}x{size}",
            image.height, image.width
        )));
    }
    let l = model.config.model.max_len;
    let truncated = words(instruction).len() > l;
    if truncated {
        log::warn!("instruction longer than {l} tokens; truncating");
    }
    let tokens = vec![tokenize(instruction, vocab, l)];
    let x = image.to_tensor(model.store.dtype(), model.store.device())?.unsqueeze(0)?;
    let (a, b) = model.predict(&x, &tokens, diffusion)?;
    let p_it = ProbabilityMap::from_tensor(&a.get(0)?.detach(), Stage::Intermediate)?;
    let p_diff = b
        .map(|b| ProbabilityMap::from_tensor(&b.get(0)?.detach(), Stage::Diffusion))
        .transpose()?;
    let mask = p_diff.as_ref().unwrap_or(&p_it).binarize();
    Ok(Inference {
        p_it,
        p_diff,
        mask,
        truncated,
    })
}
