//! Top-down decoding of the multimodal pyramid into a foreground probability
//! map, and the stage-1 cross-entropy loss.

use candle_core::Tensor;

use crate::encoder::FeaturePyramid;
use crate::error::{shape_err, Error, Result};
use crate::nn::{resize_bilinear, softmax, Conv2d, ParamPath};

/// Probability clamp used inside the cross-entropy.
pub const LOSS_EPS: f64 = 1e-7;

/// Decoded features, index 0 = finest. Entry `j` has the spatial size of block `j + 1`.
#[derive(Debug, Clone)]
pub struct DecodedFeatureStack {
    pub levels: Vec<Tensor>,
}

impl DecodedFeatureStack {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn finest(&self) -> Result<&Tensor> {
        self.levels.first().ok_or_else(|| shape_err!("empty decoded stack"))
    }
}

/// Channel widths of the decoded stack for block widths `channels` and decoder width `c_dec`.
pub fn decoded_widths(channels: &[usize], c_dec: usize) -> Vec<usize> {
    let m = channels.len();
    (0..m).map(|j| if j + 1 == m { channels[j] } else { c_dec }).collect()
}

/// `H^(M) = F_M`; `H^(i) = ReLU(conv3x3([up(H^(i+1)); F_i]))`.
#[derive(Debug, Clone)]
pub struct TopDownDecoder {
    convs: Vec<Conv2d>,
    widths: Vec<usize>,
}

impl TopDownDecoder {
    pub fn new(p: &ParamPath<'_>, channels: &[usize], c_dec: usize) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Config("decoder needs at least one level".into()));
        }
        let widths = decoded_widths(channels, c_dec);
        let convs = (0..channels.len() - 1)
            .map(|j| Conv2d::same3(&p.pp(format!("conv{j}")), widths[j + 1] + channels[j], c_dec))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { convs, widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn decode(&self, features: &[Tensor]) -> Result<DecodedFeatureStack> {
        let m = self.widths.len();
        if features.len() != m {
            return Err(shape_err!("decoder built for {m} levels, got {}", features.len()));
        }
        let mut levels = vec![features[m - 1].clone()];
        for j in (0..m - 1).rev() {
            let (_, _, h, w) = features[j].dims4()?;
            let coarse = levels.last().expect("stack starts non-empty");
            let up = resize_bilinear(coarse, h, w)?;
            let cat = Tensor::cat(&[&up, &features[j]], 1)?;
            levels.push(self.convs[j].forward(&cat)?.relu()?);
        }
        levels.reverse();
        Ok(DecodedFeatureStack { levels })
    }

    pub fn decode_pyramid(&self, pyramid: &FeaturePyramid) -> Result<DecodedFeatureStack> {
        let f: Vec<Tensor> = pyramid.levels.iter().map(|l| l.f.clone()).collect();
        self.decode(&f)
    }
}

/// 1x1 conv to (background, foreground) logits on the finest decoded map.
#[derive(Debug, Clone)]
pub struct PredictionHead {
    conv: Conv2d,
    output_size: usize,
}

impl PredictionHead {
    pub fn new(p: &ParamPath<'_>, c_dec: usize, output_size: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::pointwise(&p.pp("conv"), c_dec, 2)?,
            output_size,
        })
    }

    /// `(B, 2, H_1, W_1)` logits.
    pub fn logits(&self, stack: &DecodedFeatureStack) -> Result<Tensor> {
        self.conv.forward(stack.finest()?)
    }

    /// Foreground probability `(B, H, W)`.
    pub fn forward(&self, stack: &DecodedFeatureStack) -> Result<Tensor> {
        probability_from_logits(&self.logits(stack)?, self.output_size)
    }
}

/// Upsamples two-channel logits to `size` and returns the foreground softmax channel.
pub fn probability_from_logits(logits: &Tensor, size: usize) -> Result<Tensor> {
    let (_, c, _, _) = logits.dims4()?;
    if c != 2 {
        return Err(shape_err!("expected 2 logit channels, got {c}"));
    }
    let up = resize_bilinear(logits, size, size)?;
    Ok(softmax(&up, 1)?.narrow(1, 1, 1)?.squeeze(1)?)
}

/// Mean two-class cross-entropy of foreground probabilities `p` against
/// binary targets `y` (same shape), with `p` clamped to `[eps, 1 - eps]`.
pub fn intermediate_loss(p: &Tensor, y: &Tensor) -> Result<Tensor> {
    if p.dims() != y.dims() {
        return Err(shape_err!("loss inputs {:?} vs {:?}", p.dims(), y.dims()));
    }
    let p = p.clamp(LOSS_EPS, 1.0 - LOSS_EPS)?;
    let pos = (y * p.log()?)?;
    let neg = (y.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.neg()?.mean_all()?)
}
