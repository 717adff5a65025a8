//! Small neural-network toolkit on top of candle tensors.

mod conv;
mod optim;
mod params;
mod resize;

pub use conv::{conv2d, Conv2d};
pub use optim::{Adam, AdamConfig};
pub use params::{Init, ParamPath, ParamStore};
pub use resize::{bilinear_weights, resize_bilinear};

use candle_core::{Tensor, D};

use crate::error::{shape_err, Result};

/// Additive score for masked attention keys. Large enough that `exp` underflows
/// to exactly zero and any finite score added to it rounds back to it.
pub const MASK_FILL: f64 = -1e30;

/// Fully connected layer acting on the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(p: &ParamPath<'_>, input: usize, output: usize) -> Result<Self> {
        let weight = p.get((output, input), "weight", Init::fan_in_uniform(input))?;
        let bias = p.get(output, "bias", Init::fan_in_uniform(input))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let (out, inp) = self.weight.dims2()?;
        let last = *dims.last().ok_or_else(|| shape_err!("linear on a scalar"))?;
        if last != inp {
            return Err(shape_err!("linear expects {inp} features, got {last}"));
        }
        let rows = x.elem_count() / inp;
        let y = x
            .contiguous()?
            .reshape((rows, inp))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        let mut shape = dims;
        *shape.last_mut().unwrap() = out;
        Ok(y.reshape(shape)?)
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(p: &ParamPath<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: p.get(dim, "weight", Init::Const(1.0))?,
            beta: p.get(dim, "bias", Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Batch normalization over `(N, H, W)` for each channel of an NCHW tensor.
///
/// Training mode normalizes with batch statistics and updates the running
/// averages; evaluation mode uses the running averages only.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: candle_core::Var,
    running_var: candle_core::Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(p: &ParamPath<'_>, channels: usize, gamma_init: f64) -> Result<Self> {
        Ok(Self {
            gamma: p.get(channels, "weight", Init::Const(gamma_init))?,
            beta: p.get(channels, "bias", Init::Const(0.0))?,
            running_mean: p.buffer(channels, "running_mean", Init::Const(0.0))?,
            running_var: p.buffer(channels, "running_var", Init::Const(1.0))?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    fn affine(&self, normed: &Tensor) -> Result<Tensor> {
        let c = self.gamma.dim(0)?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }

    pub fn forward_train(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let count = n * h * w;
        let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
        let normed = centered.broadcast_div(&(&var + self.eps)?.sqrt()?)?;

        let m = self.momentum;
        let unbiased = if count > 1 {
            (var.detach().reshape(c)? * (count as f64 / (count - 1) as f64))?
        } else {
            var.detach().reshape(c)?
        };
        let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().reshape(c)? * m)?)?;
        let new_var = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
        self.running_mean.set(&new_mean)?;
        self.running_var.set(&new_var)?;
        self.affine(&normed)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.gamma.dim(0)?;
        let mean = self.running_mean.as_tensor().reshape((1, c, 1, 1))?;
        let std = (self.running_var.as_tensor() + self.eps)?.sqrt()?.reshape((1, c, 1, 1))?;
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
        self.affine(&normed)
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        if train {
            self.forward_train(x)
        } else {
            self.forward_eval(x)
        }
    }
}

/// Numerically stable softmax built from differentiable primitives.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?;
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(dim)?;
    Ok(e.broadcast_div(&sum)?)
}

/// Softmax over the last axis of `scores: (B, Q, K)` with keys where
/// `key_mask: (B, K)` is zero removed from the distribution.
pub fn masked_softmax(scores: &Tensor, key_mask: &Tensor) -> Result<Tensor> {
    let (b, _, k) = scores.dims3()?;
    if key_mask.dims() != [b, k] {
        return Err(shape_err!(
            "key mask {:?} does not match scores {:?}",
            key_mask.dims(),
            scores.dims()
        ));
    }
    let bias = ((key_mask.to_dtype(scores.dtype())? - 1.0)? * -MASK_FILL)?;
    let bias = bias.reshape((b, 1, k))?;
    softmax(&scores.broadcast_add(&bias)?, 2)
}
