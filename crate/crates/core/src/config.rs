//! Run configuration, loadable from TOML. Every section has defaults so a
//! config file only needs the keys it overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::DenoiserConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::AdamConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    #[serde(alias = "C1")]
    pub c1: usize,
    #[serde(alias = "M")]
    pub blocks: usize,
    #[serde(alias = "C_clp")]
    pub c_clp: usize,
    pub use_global_branch: bool,
    pub text_dim: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    /// Token length l.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            c1: 32,
            blocks: 4,
            c_clp: 512,
            use_global_branch: true,
            text_dim: 64,
            text_layers: 2,
            text_heads: 4,
            max_len: 20,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: self.image_size,
            c1: self.c1,
            blocks: self.blocks,
            c_clp: self.c_clp,
            use_global_branch: self.use_global_branch,
            text_dim: self.text_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{name}.batch_size must be positive")));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("{name}.lr must be positive")));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} betas must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epochs: 11,
            batch_size: 16,
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// Early-stop patience in optimizer steps.
    pub patience: usize,
    pub level_selection: Vec<usize>,
    pub clamp_probability: bool,
    /// Fraction of the stage-2 split held out for early stopping.
    pub holdout_fraction: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 1,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.0,
            warmup_epochs: 3,
            patience: 50,
            level_selection: vec![0, 1, 2],
            clamp_probability: true,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    #[serde(alias = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub t_infer: usize,
    /// Seed of the fixed noise draw used for feature extraction.
    pub noise_seed: u64,
    pub widths: Vec<usize>,
    pub time_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Stage2Config {
    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
        }
    }
}

impl DiffusionConfig {
    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: 0.0,
            ..Default::default()
        }
    }
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            t_infer: 50,
            noise_seed: 7,
            widths: vec![8, 16, 32, 64, 128, 256],
            time_dim: 32,
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub data_dir: PathBuf,
    pub stage1_dir: PathBuf,
    pub ddpm_dir: PathBuf,
    pub stage2_dir: PathBuf,
    pub eval_dir: PathBuf,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            stage1_dir: "runs/stage1".into(),
            ddpm_dir: "runs/ddpm".into(),
            stage2_dir: "runs/stage2".into(),
            eval_dir: "runs/eval".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub stage1: OptimConfig,
    pub stage2: Stage2Config,
    pub diffusion: DiffusionConfig,
    pub paths: PathConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            stage1: OptimConfig::default(),
            stage2: Stage2Config::default(),
            diffusion: DiffusionConfig::default(),
            paths: PathConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            image_size: self.model.image_size,
            widths: self.diffusion.widths.clone(),
            time_dim: self.diffusion.time_dim,
            level_offset: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder().validate()?;
        self.denoiser().validate()?;
        self.stage1.validate("stage1")?;
        self.stage2.optim().validate("stage2")?;
        self.diffusion.optim().validate("diffusion")?;
        if !(0.0..1.0).contains(&self.stage2.holdout_fraction) {
            return Err(Error::Config("stage2.holdout_fraction must lie in [0, 1)".into()));
        }
        let d = &self.diffusion;
        if d.t_infer == 0 || d.t_infer > d.steps {
            return Err(Error::Config(format!("t_infer {} outside 1..={}", d.t_infer, d.steps)));
        }
        if self.model.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        let levels = self.model.blocks.min(self.denoiser().levels());
        if self.stage2.level_selection.is_empty() {
            return Err(Error::Config("level_selection is empty".into()));
        }
        if let Some(n) = self.stage2.level_selection.iter().find(|&&n| n >= levels) {
            return Err(Error::Config(format!("level {n} not available (have {levels})")));
        }
        for (n, w) in self.diffusion.widths.iter().enumerate().skip(2) {
            let side = self.model.image_size >> n;
            let stage1_side = self.model.encoder().side(n - 2);
            if n - 2 < self.model.blocks && side != stage1_side {
                return Err(Error::Config(format!(
                    "denoiser resolution {side} (width {w}) does not match stage-1 level {}",
                    n - 2
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_hyperparameter_table() {
        let c = RunConfig::default();
        assert_eq!((c.stage1.epochs, c.stage1.batch_size, c.stage1.lr), (11, 16, 5e-5));
        assert_eq!((c.stage2.epochs, c.stage2.batch_size, c.stage2.lr), (5, 1, 1e-3));
        assert_eq!((c.stage1.beta1, c.stage1.beta2), (0.9, 0.99));
        assert_eq!((c.stage2.warmup_epochs, c.stage2.patience), (3, 50));
        assert_eq!(c.stage2.level_selection, [0, 1, 2]);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_with_aliases() {
        let c = RunConfig::from_toml_str(
            "seed = 3\n[model]\nC1 = 16\nC_clp = 256\nuse_global_branch = false\n[stage2]\nlevel_selection = [0]\npatience = 10\n[diffusion]\nT = 40\nt_infer = 20\n",
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.model.c1, 16);
        assert!(!c.model.use_global_branch);
        assert_eq!(c.stage2.patience, 10);
        assert_eq!(c.diffusion.steps, 40);
        assert_eq!(c.stage1, OptimConfig::default());
    }

    #[test]
    fn rejects_bad_values() {
        for s in [
            "[model]\nc_clp = 500\n",
            "[diffusion]\nt_infer = 0\n",
            "[stage2]\nlevel_selection = []\n",
            "[stage2]\nlevel_selection = [7]\n",
            "[stage1]\nbatch_size = 0\n",
            "bogus = 1\n",
        ] {
            assert!(matches!(RunConfig::from_toml_str(s), Err(Error::Config(_))), "{s}");
        }
    }
}
