use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Forward-process noise schedule. Tables are indexed by `t - 1` for `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("empty beta schedule".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Betas linearly interpolated from `beta_start` to `beta_end` over `steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs T >= 1".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidInput(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
    pub fn forward_noise(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        if x0.dims() != eps.dims() {
            return Err(shape_err!("noise {:?} for signal {:?}", eps.dims(), x0.dims()));
        }
        let ab = self.alpha_bar(t)?;
        Ok(((x0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
    }

    /// Draws `eps` from `rng` and returns `(x_t, eps)`.
    pub fn forward_noise_sampled(&self, x0: &Tensor, t: usize, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
        let eps = standard_normal(x0.dims(), x0.dtype(), x0.device(), rng)?;
        Ok((self.forward_noise(x0, t, &eps)?, eps))
    }

    /// Single-step clean-signal estimate `(x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`.
    pub fn estimate_x0(&self, x_t: &Tensor, t: usize, eps_hat: &Tensor) -> Result<Tensor> {
        if x_t.dims() != eps_hat.dims() {
            return Err(shape_err!("noise estimate {:?} for {:?}", eps_hat.dims(), x_t.dims()));
        }
        let ab = self.alpha_bar(t)?;
        Ok(((x_t - (eps_hat * (1.0 - ab).sqrt())?)? / ab.sqrt())?)
    }
}

/// A tensor of i.i.d. standard normal draws from a seeded generator.
pub fn standard_normal(shape: &[usize], dtype: DType, device: &Device, rng: &mut impl Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}
