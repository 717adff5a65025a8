//! Checkpoint directories:
//!
//! ```text
//! weights.safetensors    model tensors (including normalization buffers)
//! optimizer.safetensors  Adam moments, absent when no step was taken
//! config.toml            the run configuration
//! state.json             counters and best validation value
//! vocab.txt              vocabulary the text encoder was built for
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};
use crate::text::Vocabulary;

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const CONFIG_FILE: &str = "config.toml";
pub const STATE_FILE: &str = "state.json";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: String,
    pub epoch: usize,
    pub iteration: usize,
    pub optimizer_steps: usize,
    /// Best validation value (mIoU for stage 1, loss for stage 2) and where it occurred.
    pub best_value: Option<f64>,
    pub best_iteration: Option<usize>,
    pub final_loss: Option<f64>,
    pub weights_prefix: String,
}

/// Writes a checkpoint holding every tensor under `state.weights_prefix`.
pub fn save(
    dir: &Path,
    store: &ParamStore,
    optimizer: Option<&Adam>,
    config: &RunConfig,
    state: &TrainState,
    vocab: &Vocabulary,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    store.save(&dir.join(WEIGHTS_FILE), &state.weights_prefix)?;
    let opt_path = dir.join(OPTIMIZER_FILE);
    match optimizer {
        Some(opt) if opt.step_count() > 0 => {
            let st: std::collections::HashMap<String, Tensor> = opt.state()?.into_iter().collect();
            candle_core::safetensors::save(&st, &opt_path)?;
        }
        _ => {
            if opt_path.exists() {
                fs::remove_file(&opt_path).map_err(|e| Error::io(&opt_path, e))?;
            }
        }
    }
    let cpath = dir.join(CONFIG_FILE);
    fs::write(&cpath, config.to_toml()?).map_err(|e| Error::io(&cpath, e))?;
    let spath = dir.join(STATE_FILE);
    fs::write(&spath, serde_json::to_string_pretty(state)?).map_err(|e| Error::io(&spath, e))?;
    vocab.save(&dir.join(VOCAB_FILE))
}

pub fn load_config(dir: &Path) -> Result<RunConfig> {
    RunConfig::load(&dir.join(CONFIG_FILE))
}

pub fn load_state(dir: &Path) -> Result<TrainState> {
    let p = dir.join(STATE_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_vocab(dir: &Path) -> Result<Vocabulary> {
    Vocabulary::load(&dir.join(VOCAB_FILE))
}

/// Loads stored weights into `store`; all declared tensors under `required_prefix` must be present.
pub fn load_weights(dir: &Path, store: &ParamStore, required_prefix: &str) -> Result<usize> {
    store.load(&dir.join(WEIGHTS_FILE), required_prefix)
}

/// Adam moments, empty if the checkpoint never took an optimizer step.
pub fn load_optimizer_state(dir: &Path) -> Result<BTreeMap<String, Tensor>> {
    let p = dir.join(OPTIMIZER_FILE);
    if !p.exists() {
        return Ok(BTreeMap::new());
    }
    Ok(candle_core::safetensors::load(&p, &Device::Cpu)?.into_iter().collect())
}
