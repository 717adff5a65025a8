//! 2-D convolution lowered to a single GEMM over an im2col buffer.
//!
//! The unfold kernel is a custom op whose backward pass is the matching
//! fold (col2im), so both the input and the kernel gradients go through
//! ordinary matrix products.

use candle_core::{bail, CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use super::params::{Init, ParamPath};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy)]
struct Unfold {
    k: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct Fold {
    unfold: Unfold,
    n: usize,
    h: usize,
    w: usize,
}

impl Unfold {
    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Visits every (column-buffer index, image index) pair that reads a
    /// non-padding pixel. Column rows are `(c, ky, kx)`, columns are `(n, oy, ox)`.
    #[inline]
    fn for_each<F: FnMut(usize, usize)>(&self, n: usize, c: usize, h: usize, w: usize, mut f: F) {
        let (ho, wo) = self.out_hw(h, w);
        let l = ho * wo;
        let kk = self.k * self.k;
        for b in 0..n {
            for ci in 0..c {
                let plane = (b * c + ci) * h * w;
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let row = (ci * kk + ky * self.k + kx) * n * l + b * l;
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = plane + iy as usize * w;
                            let dst_row = row + oy * wo;
                            for ox in 0..wo {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                f(dst_row + ox, src_row + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }

    fn unfold<T: WithDType>(&self, src: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
        let (ho, wo) = self.out_hw(h, w);
        let mut dst = vec![T::zero(); c * self.k * self.k * n * ho * wo];
        self.for_each(n, c, h, w, |d, s| dst[d] = src[s]);
        dst
    }

    fn fold<T: WithDType>(&self, src: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
        let mut dst = vec![T::zero(); n * c * h * w];
        self.for_each(n, c, h, w, |d, s| dst[s] += src[d]);
        dst
    }
}

fn contiguous_range(layout: &Layout, op: &str) -> candle_core::Result<(usize, usize)> {
    match layout.contiguous_offsets() {
        Some(r) => Ok(r),
        None => bail!("{op}: input must be contiguous"),
    }
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l.shape().dims4()?;
        let (ho, wo) = self.out_hw(h, w);
        let (a, b) = contiguous_range(l, "unfold")?;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(self.unfold(&v[a..b], n, c, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(self.unfold(&v[a..b], n, c, h, w)),
            _ => bail!("unfold: unsupported dtype"),
        };
        Ok((out, Shape::from((c * self.k * self.k, n * ho * wo))))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let (n, _, h, w) = arg.dims4()?;
        let fold = Fold {
            unfold: *self,
            n,
            h,
            w,
        };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&fold)?))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (rows, _) = l.shape().dims2()?;
        let c = rows / (self.unfold.k * self.unfold.k);
        let (n, h, w) = (self.n, self.h, self.w);
        let (a, b) = contiguous_range(l, "fold")?;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(self.unfold.fold(&v[a..b], n, c, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(self.unfold.fold(&v[a..b], n, c, h, w)),
            _ => bail!("fold: unsupported dtype"),
        };
        Ok((out, Shape::from((n, c, h, w))))
    }
}

/// Cross-correlation of `x: (N, C, H, W)` with `weight: (Co, C, k, k)`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (co, ci, k, k2) = weight.dims4()?;
    if ci != c || k != k2 {
        return Err(shape_err!(
            "conv2d: input has {c} channels, kernel expects {ci} (kernel {k}x{k2})"
        ));
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(shape_err!("conv2d: {h}x{w} input smaller than {k}x{k} kernel"));
    }
    let unfold = Unfold {
        k,
        stride,
        pad: padding,
    };
    let (ho, wo) = unfold.out_hw(h, w);
    let cols = x.contiguous()?.apply_op1(unfold)?;
    let mut y = weight.reshape((co, c * k * k))?.matmul(&cols)?;
    if let Some(b) = bias {
        y = y.broadcast_add(&b.reshape((co, 1))?)?;
    }
    Ok(y.reshape((co, n, ho, wo))?.transpose(0, 1)?.contiguous()?)
}

/// Square-kernel convolution layer with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        p: &ParamPath<'_>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = p.get(
            (out_channels, in_channels, kernel, kernel),
            "weight",
            Init::fan_in_uniform(fan_in),
        )?;
        let bias = p.get(out_channels, "bias", Init::fan_in_uniform(fan_in))?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// 3x3, stride 1, same padding.
    pub fn same3(p: &ParamPath<'_>, cin: usize, cout: usize) -> Result<Self> {
        Self::new(p, cin, cout, 3, 1, 1)
    }

    /// 3x3, stride 2, halves the spatial size.
    pub fn down3(p: &ParamPath<'_>, cin: usize, cout: usize) -> Result<Self> {
        Self::new(p, cin, cout, 3, 2, 1)
    }

    pub fn pointwise(p: &ParamPath<'_>, cin: usize, cout: usize) -> Result<Self> {
        Self::new(p, cin, cout, 1, 1, 0)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, Some(&self.bias), self.stride, self.padding)
    }
}
