//! Bilinear resizing expressed as two matrix products, so it is differentiable
//! with the ordinary matmul backward pass.

use candle_core::Tensor;

use crate::error::{shape_err, Result};

/// Row-stochastic `(out, in)` interpolation matrix with half-pixel centres
/// (`align_corners = false`).
pub fn bilinear_weights(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

fn weights_tensor(x: &Tensor, input: usize, output: usize) -> Result<Tensor> {
    // (in, out) so that rows of x multiply on the left
    let w = Tensor::from_vec(bilinear_weights(input, output), (output, input), x.device())?;
    Ok(w.t()?.to_dtype(x.dtype())?)
}

/// Resizes `x: (N, C, H, W)` to `(N, C, out_h, out_w)`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(shape_err!("resize to empty size {out_h}x{out_w}"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let rows = x
        .contiguous()?
        .reshape((n * c * h, w))?
        .matmul(&weights_tensor(x, w, out_w)?)?;
    let cols = rows
        .reshape((n * c, h, out_w))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n * c * out_w, h))?
        .matmul(&weights_tensor(x, h, out_h)?)?;
    Ok(cols
        .reshape((n * c, out_w, out_h))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n, c, out_h, out_w))?)
}
