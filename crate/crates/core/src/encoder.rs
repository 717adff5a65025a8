//! Hierarchical crossmodal image encoder: parallel local/global image branches
//! fused in block 1, then per block a pixel-word attention module (PWAM) and a
//! language gate whose output feeds the next block.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{masked_softmax, resize_bilinear, Conv2d, Linear, ParamPath};
use crate::text::LanguageFeatures;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    /// Channel width of block 1; block `i` has `c1 * 2^(i-1)`.
    pub c1: usize,
    /// Number of blocks M.
    pub blocks: usize,
    /// Width of the global image embedding.
    pub c_clp: usize,
    pub use_global_branch: bool,
    /// Width of the language features consumed by PWAM.
    pub text_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            c1: 32,
            blocks: 4,
            c_clp: 512,
            use_global_branch: true,
            text_dim: 64,
        }
    }
}

/// Side of the square map the global embedding is reshaped into, `sqrt(c_clp / c1)`.
pub fn global_map_side(c_clp: usize, c1: usize) -> Result<usize> {
    if c1 == 0 || c_clp % c1 != 0 {
        return Err(Error::Config(format!("C_clp = {c_clp} is not a multiple of C_1 = {c1}")));
    }
    let ratio = c_clp / c1;
    let side = (ratio as f64).sqrt().round() as usize;
    if side == 0 || side * side != ratio {
        return Err(Error::Config(format!(
            "sqrt(C_clp / C_1) = sqrt({ratio}) is not a positive integer"
        )));
    }
    Ok(side)
}

impl EncoderConfig {
    /// Spatial size of block 1 (a quarter of the image side).
    pub fn h1(&self) -> usize {
        self.image_size / 4
    }

    pub fn channels(&self, block: usize) -> usize {
        self.c1 << block
    }

    pub fn side(&self, block: usize) -> usize {
        self.h1() >> block
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(Error::Config(format!("image size {} not divisible by 4", self.image_size)));
        }
        let h1 = self.h1();
        if h1 % (1 << (self.blocks - 1)) != 0 {
            return Err(Error::Config(format!(
                "H_1 = {h1} cannot be halved {} times",
                self.blocks - 1
            )));
        }
        if self.c1 < 2 {
            return Err(Error::Config("C_1 must be at least 2".into()));
        }
        if self.use_global_branch {
            global_map_side(self.c_clp, self.c1)?;
        }
        Ok(())
    }
}

/// One block of the pyramid. All tensors are `(B, C_i, H_i, W_i)`.
#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub v: Tensor,
    pub f: Tensor,
    pub e: Tensor,
    pub s: Tensor,
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<PyramidLevel>,
}

impl FeaturePyramid {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Small conv encoder pooled to a `c_clp` vector, laid out channel-last as a
/// `side x side x c1` map and upsampled to block-1 resolution.
#[derive(Debug, Clone)]
struct GlobalBranch {
    convs: Vec<Conv2d>,
    proj: Linear,
    side: usize,
    c1: usize,
}

impl GlobalBranch {
    fn new(p: &ParamPath<'_>, cfg: &EncoderConfig) -> Result<Self> {
        let widths = [3, 16, 32, 64];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::down3(&p.pp(format!("conv{i}")), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            convs,
            proj: Linear::new(&p.pp("proj"), 64, cfg.c_clp)?,
            side: global_map_side(cfg.c_clp, cfg.c1)?,
            c1: cfg.c1,
        })
    }

    /// Returns the global embedding `(B, c_clp)` and the upsampled map `(B, c1, h1, h1)`.
    fn forward(&self, x: &Tensor, h1: usize) -> Result<(Tensor, Tensor)> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.relu()?;
        }
        let pooled = h.mean(3)?.mean(2)?;
        let embedding = self.proj.forward(&pooled)?;
        let b = embedding.dim(0)?;
        let map = embedding
            .reshape((b, self.side, self.side, self.c1))?
            .permute((0, 3, 1, 2))?
            .contiguous()?;
        Ok((embedding, resize_bilinear(&map, h1, h1)?))
    }
}

/// Intermediate PWAM quantities, exposed for inspection.
#[derive(Debug, Clone)]
pub struct PwamOutput {
    /// `(B, H_i W_i, l)`, rows sum to one over valid tokens.
    pub attention: Tensor,
    /// `(B, H_i W_i, C_i)`, attention-weighted language values per pixel.
    pub g_prime: Tensor,
    /// `(B, C_i, H_i, W_i)`.
    pub f: Tensor,
}

/// Pixel-word attention: single-head attention from every pixel to the
/// instruction tokens, then a multiplicative fusion with the visual features.
#[derive(Debug, Clone)]
pub struct Pwam {
    q: Conv2d,
    k: Linear,
    v: Linear,
    w: Conv2d,
    m: Conv2d,
    f: Conv2d,
    channels: usize,
}

impl Pwam {
    pub fn new(p: &ParamPath<'_>, channels: usize, text_dim: usize) -> Result<Self> {
        Ok(Self {
            q: Conv2d::pointwise(&p.pp("q"), channels, channels)?,
            k: Linear::new(&p.pp("k"), text_dim, channels)?,
            v: Linear::new(&p.pp("v"), text_dim, channels)?,
            w: Conv2d::pointwise(&p.pp("w"), channels, channels)?,
            m: Conv2d::pointwise(&p.pp("m"), channels, channels)?,
            f: Conv2d::pointwise(&p.pp("f"), channels, channels)?,
            channels,
        })
    }

    pub fn forward(&self, v: &Tensor, lang: &LanguageFeatures) -> Result<Tensor> {
        Ok(self.forward_detailed(v, lang)?.f)
    }

    pub fn forward_detailed(&self, v: &Tensor, lang: &LanguageFeatures) -> Result<PwamOutput> {
        let (b, c, h, w) = v.dims4()?;
        if c != self.channels {
            return Err(shape_err!("PWAM built for {} channels, got {c}", self.channels));
        }
        if lang.features.dim(0)? != b {
            return Err(shape_err!(
                "{} instructions for {b} images",
                lang.features.dim(0)?
            ));
        }
        if let Some(i) = lang.valid_lengths.iter().position(|&n| n == 0) {
            return Err(Error::InvalidInput(format!(
                "instruction {i} has no tokens to attend to"
            )));
        }
        let q = self
            .q
            .forward(v)?
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let k = self.k.forward(&lang.features)?;
        let val = self.v.forward(&lang.features)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (c as f64).sqrt()))?;
        let attention = masked_softmax(&scores, &lang.mask)?;
        let g_prime = attention.matmul(&val)?;
        let g = g_prime.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?;
        let g = self.w.forward(&g)?;
        let f = self.f.forward(&(self.m.forward(v)? * g)?)?;
        Ok(PwamOutput {
            attention,
            g_prime,
            f,
        })
    }
}

/// `S = tanh(conv1x1(F))`, `E = F * S + V`.
#[derive(Debug, Clone)]
pub struct LanguageGate {
    conv: Conv2d,
}

impl LanguageGate {
    pub fn new(p: &ParamPath<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::pointwise(&p.pp("conv"), channels, channels)?,
        })
    }

    /// Returns `(E, S)`.
    pub fn forward(&self, f: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
        if f.dims() != v.dims() {
            return Err(shape_err!("gate inputs {:?} vs {:?}", f.dims(), v.dims()));
        }
        let s = self.conv.forward(f)?.tanh()?;
        let e = ((f * &s)? + v)?;
        Ok((e, s))
    }
}

#[derive(Debug, Clone)]
enum Stem {
    Parallel { global: GlobalBranch, fuse: Conv2d },
    LocalOnly { fuse: Conv2d },
}

#[derive(Debug, Clone)]
struct Block {
    down: Option<(Conv2d, Conv2d)>,
    pwam: Pwam,
    gate: LanguageGate,
}

#[derive(Debug, Clone)]
pub struct MultimodalEncoder {
    local: Vec<Conv2d>,
    stem: Stem,
    blocks: Vec<Block>,
    config: EncoderConfig,
}

impl MultimodalEncoder {
    pub fn new(p: &ParamPath<'_>, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let c1 = config.c1;
        let lp = p.pp("local");
        let local = vec![
            Conv2d::down3(&lp.pp("conv0"), 3, c1 / 2)?,
            Conv2d::down3(&lp.pp("conv1"), c1 / 2, c1)?,
            Conv2d::same3(&lp.pp("conv2"), c1, c1)?,
        ];
        let stem = if config.use_global_branch {
            Stem::Parallel {
                global: GlobalBranch::new(&p.pp("global"), &config)?,
                fuse: Conv2d::same3(&p.pp("fuse"), 2 * c1, c1)?,
            }
        } else {
            Stem::LocalOnly {
                fuse: Conv2d::same3(&p.pp("fuse_local"), c1, c1)?,
            }
        };
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let bp = p.pp(format!("block{i}"));
            let ci = config.channels(i);
            let down = if i == 0 {
                None
            } else {
                Some((
                    Conv2d::down3(&bp.pp("down"), config.channels(i - 1), ci)?,
                    Conv2d::same3(&bp.pp("conv"), ci, ci)?,
                ))
            };
            blocks.push(Block {
                down,
                pwam: Pwam::new(&bp.pp("pwam"), ci, config.text_dim)?,
                gate: LanguageGate::new(&bp.pp("gate"), ci)?,
            });
        }
        Ok(Self {
            local,
            stem,
            blocks,
            config,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Block-1 visual features `V_1` from an image batch `(B, 3, H, W)`.
    pub fn encode_image(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let size = self.config.image_size;
        if c != 3 || h != size || w != size {
            return Err(shape_err!("expected (B, 3, {size}, {size}) images, got {:?}", x.dims()));
        }
        let mut local = x.clone();
        for conv in &self.local {
            local = conv.forward(&local)?.relu()?;
        }
        match &self.stem {
            Stem::Parallel { global, fuse } => {
                let (_, map) = global.forward(x, self.config.h1())?;
                fuse.forward(&Tensor::cat(&[&local, &map], 1)?)
            }
            Stem::LocalOnly { fuse } => fuse.forward(&local),
        }
    }

    pub fn forward(&self, x: &Tensor, lang: &LanguageFeatures) -> Result<FeaturePyramid> {
        let mut levels: Vec<PyramidLevel> = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let v = match (&block.down, levels.last()) {
                (None, _) => self.encode_image(x)?,
                (Some((down, conv)), Some(prev)) => conv.forward(&down.forward(&prev.e)?.relu()?)?,
                (Some(_), None) => unreachable!("only block 0 lacks a downsampler"),
            };
            let f = block.pwam.forward(&v, lang)?;
            let (e, s) = block.gate.forward(&f, &v)?;
            levels.push(PyramidLevel { v, f, e, s });
        }
        Ok(FeaturePyramid { levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::text::mask_from_lengths;
    use candle_core::{DType, Device};

    fn lang(features: Tensor, lengths: &[usize]) -> LanguageFeatures {
        let l = features.dim(1).unwrap();
        LanguageFeatures {
            mask: mask_from_lengths(lengths, l, features.dtype(), features.device()).unwrap(),
            features,
            valid_lengths: lengths.to_vec(),
        }
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn global_side_arithmetic() {
        assert_eq!(global_map_side(512, 128).unwrap(), 2);
        assert_eq!(global_map_side(512, 32).unwrap(), 4);
        assert!(matches!(global_map_side(512, 64), Err(Error::Config(_))));
        assert!(matches!(global_map_side(100, 3), Err(Error::Config(_))));
    }

    #[test]
    fn pyramid_geometry_with_and_without_global_branch() {
        for use_global_branch in [true, false] {
            let store = ParamStore::new(DType::F32, 3);
            let cfg = EncoderConfig {
                use_global_branch,
                ..Default::default()
            };
            let enc = MultimodalEncoder::new(&store.root(), cfg).unwrap();
            let x = Tensor::rand(0f32, 1.0, (2, 3, 64, 64), &Device::Cpu).unwrap();
            let feats = Tensor::randn(0f32, 1.0, (2, 20, 64), &Device::Cpu).unwrap();
            let pyr = enc.forward(&x, &lang(feats, &[5, 20])).unwrap();
            assert_eq!(pyr.len(), 4);
            for (i, lvl) in pyr.levels.iter().enumerate() {
                let want = [2, 32 << i, 16 >> i, 16 >> i];
                assert_eq!(lvl.v.dims(), want);
                assert_eq!(lvl.f.dims(), want);
                assert_eq!(lvl.e.dims(), want);
            }
        }
    }

    #[test]
    fn rejects_non_integral_global_side() {
        let store = ParamStore::new(DType::F32, 0);
        let cfg = EncoderConfig {
            c_clp: 500,
            ..Default::default()
        };
        assert!(matches!(MultimodalEncoder::new(&store.root(), cfg), Err(Error::Config(_))));
    }

    #[test]
    fn single_token_attention_is_one() {
        let store = ParamStore::new(DType::F64, 1);
        let pwam = Pwam::new(&store.root(), 8, 6).unwrap();
        let v = Tensor::randn(0f64, 1.0, (1, 8, 4, 4), &Device::Cpu).unwrap();
        let feats = Tensor::randn(0f64, 1.0, (1, 5, 6), &Device::Cpu).unwrap();
        let out = pwam.forward_detailed(&v, &lang(feats.clone(), &[1])).unwrap();
        let a: Vec<Vec<f64>> = out.attention.squeeze(0).unwrap().to_vec2().unwrap();
        for row in &a {
            assert_eq!(row[0], 1.0);
            assert!(row[1..].iter().all(|&w| w == 0.0));
        }
        let v1 = pwam.v.forward(&feats.narrow(1, 0, 1).unwrap()).unwrap().squeeze(0).unwrap();
        let g: Vec<Vec<f64>> = out.g_prime.squeeze(0).unwrap().to_vec2().unwrap();
        let v1: Vec<f64> = v1.squeeze(0).unwrap().to_vec1().unwrap();
        for row in g {
            for (x, y) in row.iter().zip(&v1) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_keys_split_attention_evenly() {
        let store = ParamStore::new(DType::F64, 1);
        let c = 4;
        let pwam = Pwam::new(&store.root(), c, c).unwrap();
        let eye = Tensor::eye(c, DType::F64, &Device::Cpu).unwrap();
        let zeros = Tensor::zeros(c, DType::F64, &Device::Cpu).unwrap();
        for name in ["q", "k", "v"] {
            let w = if name == "q" { eye.reshape((c, c, 1, 1)).unwrap() } else { eye.clone() };
            store.set(&format!("{name}.weight"), &w).unwrap();
            store.set(&format!("{name}.bias"), &zeros).unwrap();
        }
        // third token is padding and must be ignored
        let tok = [0.3, -0.2, 0.5, 0.1];
        let feats = Tensor::new(&[[tok, tok, [9.0, 9.0, 9.0, 9.0]]], &Device::Cpu).unwrap();
        let v = Tensor::randn(0f64, 1.0, (1, c, 2, 2), &Device::Cpu).unwrap();
        let out = pwam.forward_detailed(&v, &lang(feats, &[2])).unwrap();
        let a: Vec<Vec<f64>> = out.attention.squeeze(0).unwrap().to_vec2().unwrap();
        let g: Vec<Vec<f64>> = out.g_prime.squeeze(0).unwrap().to_vec2().unwrap();
        for (row, grow) in a.iter().zip(&g) {
            assert!((row[0] - 0.5).abs() < 1e-15 && (row[1] - 0.5).abs() < 1e-15);
            assert_eq!(row[2], 0.0);
            for (x, t) in grow.iter().zip(tok) {
                assert!((x - t).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let store = ParamStore::new(DType::F64, 2);
        let pwam = Pwam::new(&store.root(), 8, 6).unwrap();
        let v = Tensor::randn(0f64, 1.0, (3, 8, 4, 4), &Device::Cpu).unwrap();
        let feats = Tensor::randn(0f64, 1.0, (3, 7, 6), &Device::Cpu).unwrap();
        let out = pwam.forward_detailed(&v, &lang(feats, &[1, 4, 7])).unwrap();
        let sums: Vec<Vec<f64>> = out.attention.sum(2).unwrap().to_vec2().unwrap();
        assert!(sums.iter().flatten().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn padding_content_does_not_leak() {
        let store = ParamStore::new(DType::F64, 4);
        let cfg = EncoderConfig {
            image_size: 32,
            c1: 8,
            blocks: 3,
            c_clp: 32,
            use_global_branch: true,
            text_dim: 6,
        };
        let enc = MultimodalEncoder::new(&store.root(), cfg).unwrap();
        let x = Tensor::rand(0f64, 1.0, (1, 3, 32, 32), &Device::Cpu).unwrap();
        let base = Tensor::randn(0f64, 1.0, (1, 6, 6), &Device::Cpu).unwrap();
        let noise = Tensor::randn(0f64, 10.0, (1, 3, 6), &Device::Cpu).unwrap();
        let perturbed = Tensor::cat(&[&base.narrow(1, 0, 3).unwrap(), &noise], 1).unwrap();
        let a = enc.forward(&x, &lang(base, &[3])).unwrap();
        let b = enc.forward(&x, &lang(perturbed, &[3])).unwrap();
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            assert_eq!(max_abs_diff(&la.f, &lb.f), 0.0);
            assert_eq!(max_abs_diff(&la.e, &lb.e), 0.0);
        }
    }

    #[test]
    fn all_pad_instruction_is_rejected() {
        let store = ParamStore::new(DType::F32, 0);
        let pwam = Pwam::new(&store.root(), 4, 4).unwrap();
        let v = Tensor::zeros((1, 4, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let feats = Tensor::zeros((1, 3, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(pwam.forward(&v, &lang(feats, &[0])), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_gate_passes_visual_features() {
        let store = ParamStore::new(DType::F64, 5);
        let gate = LanguageGate::new(&store.root(), 6).unwrap();
        store.zero_prefix("conv").unwrap();
        let f = Tensor::randn(0f64, 1.0, (2, 6, 3, 3), &Device::Cpu).unwrap();
        let v = Tensor::randn(0f64, 1.0, (2, 6, 3, 3), &Device::Cpu).unwrap();
        let (e, s) = gate.forward(&f, &v).unwrap();
        assert_eq!(max_abs_diff(&s, &s.zeros_like().unwrap()), 0.0);
        assert_eq!(max_abs_diff(&e, &v), 0.0);
    }

    #[test]
    fn gate_with_zero_features_and_bias() {
        let store = ParamStore::new(DType::F64, 6);
        let gate = LanguageGate::new(&store.root(), 5).unwrap();
        store.zero_prefix("conv.bias").unwrap();
        let f = Tensor::zeros((1, 5, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let v = Tensor::randn(0f64, 1.0, (1, 5, 4, 4), &Device::Cpu).unwrap();
        let (e, _) = gate.forward(&f, &v).unwrap();
        assert_eq!(max_abs_diff(&e, &v), 0.0);
    }

    #[test]
    fn gate_matches_elementwise_oracle() {
        let store = ParamStore::new(DType::F64, 7);
        let gate = LanguageGate::new(&store.root(), 3).unwrap();
        let f = Tensor::randn(0f64, 0.5, (1, 3, 2, 2), &Device::Cpu).unwrap();
        let v = Tensor::randn(0f64, 0.5, (1, 3, 2, 2), &Device::Cpu).unwrap();
        let (e, _) = gate.forward(&f, &v).unwrap();
        let w: Vec<Vec<f64>> = store.var("conv.weight").unwrap().as_tensor().reshape((3, 3)).unwrap().to_vec2().unwrap();
        let bias: Vec<f64> = store.var("conv.bias").unwrap().as_tensor().to_vec1().unwrap();
        let fv: Vec<f64> = f.flatten_all().unwrap().to_vec1().unwrap();
        let vv: Vec<f64> = v.flatten_all().unwrap().to_vec1().unwrap();
        let ev: Vec<f64> = e.flatten_all().unwrap().to_vec1().unwrap();
        for c in 0..3 {
            for p in 0..4 {
                let pre: f64 = bias[c] + (0..3).map(|k| w[c][k] * fv[k * 4 + p]).sum::<f64>();
                let want = fv[c * 4 + p] * pre.tanh() + vv[c * 4 + p];
                assert!((ev[c * 4 + p] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gate_rejects_mismatched_shapes() {
        let store = ParamStore::new(DType::F32, 0);
        let gate = LanguageGate::new(&store.root(), 2).unwrap();
        let f = Tensor::zeros((1, 2, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let v = Tensor::zeros((1, 2, 2, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(gate.forward(&f, &v), Err(Error::Shape(_))));
    }
}
