use candle_core::Tensor;

use crate::error::{shape_err, Error, Result};
use crate::nn::{resize_bilinear, BatchNorm2d, Conv2d, ParamPath};

/// Residual probability head: per-level projections of the decoded stage-1
/// features are added to the denoiser estimates, resized to block-1
/// resolution and concatenated; `FC -> ReLU -> BN` then yields `delta p`.
#[derive(Debug, Clone)]
pub struct RefinementHead {
    levels: Vec<usize>,
    projections: Vec<Conv2d>,
    fc: Conv2d,
    bn: BatchNorm2d,
    fused_side: usize,
    output_size: usize,
    clamp: bool,
}

/// `C_seg`: sum of the denoiser widths over the selected levels.
pub fn fused_channels(selection: &[usize], level_widths: &[usize]) -> Result<usize> {
    selection
        .iter()
        .map(|&n| {
            level_widths
                .get(n)
                .copied()
                .ok_or_else(|| Error::Config(format!("level {n} not available")))
        })
        .sum()
}

impl RefinementHead {
    /// `stack_widths[n]` / `level_widths[n]` are the stage-1 and denoiser channel
    /// counts at level `n`. BN starts with `gamma = 0`, so `delta p` is zero at
    /// initialization.
    pub fn new(
        p: &ParamPath<'_>,
        selection: &[usize],
        stack_widths: &[usize],
        level_widths: &[usize],
        fused_side: usize,
        output_size: usize,
        clamp: bool,
    ) -> Result<Self> {
        if selection.is_empty() {
            return Err(Error::Config("empty level selection".into()));
        }
        let mut seen = selection.to_vec();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != selection.len() {
            return Err(Error::Config(format!("repeated level in selection {selection:?}")));
        }
        let c_seg = fused_channels(selection, level_widths)?;
        let projections = selection
            .iter()
            .map(|&n| {
                let cin = *stack_widths
                    .get(n)
                    .ok_or_else(|| Error::Config(format!("stage-1 stack has no level {n}")))?;
                Conv2d::pointwise(&p.pp(format!("proj{n}")), cin, level_widths[n])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            levels: selection.to_vec(),
            projections,
            fc: Conv2d::pointwise(&p.pp("fc"), c_seg, 1)?,
            bn: BatchNorm2d::new(&p.pp("bn"), 1, 0.0)?,
            fused_side,
            output_size,
            clamp,
        })
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    /// `H_seg`: `stack` holds the decoded stage-1 features at the selected
    /// levels and `estimates` the denoiser clean-signal analogs, both in
    /// selection order.
    pub fn fuse(&self, stack: &[Tensor], estimates: &[Tensor]) -> Result<Tensor> {
        let n = self.levels.len();
        if stack.len() != n || estimates.len() != n {
            return Err(shape_err!(
                "{n} levels selected, got {} stage-1 and {} denoiser maps",
                stack.len(),
                estimates.len()
            ));
        }
        let s = self.fused_side;
        let parts = stack
            .iter()
            .zip(estimates)
            .zip(&self.projections)
            .map(|((h, x0), proj)| {
                let projected = proj.forward(h)?;
                if projected.dims() != x0.dims() {
                    return Err(shape_err!(
                        "level features {:?} vs denoiser estimate {:?}",
                        projected.dims(),
                        x0.dims()
                    ));
                }
                resize_bilinear(&(x0 + projected)?, s, s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 1)?)
    }

    /// `delta p` at full resolution, `(B, H, W)`.
    pub fn delta(&self, h_seg: &Tensor, train: bool) -> Result<Tensor> {
        let z = self.fc.forward(h_seg)?.relu()?;
        let z = self.bn.forward(&z, train)?;
        Ok(resize_bilinear(&z, self.output_size, self.output_size)?.squeeze(1)?)
    }

    /// `p_diff = clamp(p_it + delta p, 0, 1)`.
    pub fn refine(&self, h_seg: &Tensor, p_it: &Tensor, train: bool) -> Result<Tensor> {
        let delta = self.delta(h_seg, train)?;
        if delta.dims() != p_it.dims() {
            return Err(shape_err!("delta {:?} vs p_it {:?}", delta.dims(), p_it.dims()));
        }
        let p = (p_it + delta)?;
        Ok(if self.clamp { p.clamp(0.0, 1.0)? } else { p })
    }
}

/// Mean absolute error between refined probabilities and binary targets.
pub fn diffusion_loss(p_diff: &Tensor, y: &Tensor) -> Result<Tensor> {
    if p_diff.dims() != y.dims() {
        return Err(shape_err!("loss inputs {:?} vs {:?}", p_diff.dims(), y.dims()));
    }
    Ok((p_diff - y)?.abs()?.mean_all()?)
}
