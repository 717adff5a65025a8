//! Assembled models: the stage-1 segmenter and the stage-2 refinement bundle,
//! plus batching helpers from dataset records to tensors.

use candle_core::{DType, Device, Tensor};

use crate::config::{ModelConfig, RunConfig};
use crate::dataset::SampleRecord;
use crate::diffusion::{extract_and_fuse, Denoiser, NoiseSchedule, RefinementHead};
use crate::encoder::{FeaturePyramid, MultimodalEncoder};
use crate::error::Result;
use crate::head::{decoded_widths, DecodedFeatureStack, PredictionHead, TopDownDecoder};
use crate::nn::{ParamPath, ParamStore};
use crate::text::{tokenize, TextEncoder, TextEncoderConfig, TokenSequence, Vocabulary};

pub const STAGE1_PREFIX: &str = "stage1";
pub const DDPM_PREFIX: &str = "ddpm";
pub const STAGE2_PREFIX: &str = "stage2";

#[derive(Debug, Clone)]
pub struct Stage1Output {
    /// Foreground probability `(B, H, W)`.
    pub prob: Tensor,
    pub stack: DecodedFeatureStack,
    pub pyramid: FeaturePyramid,
}

#[derive(Debug, Clone)]
pub struct Stage1Model {
    pub text: TextEncoder,
    pub encoder: MultimodalEncoder,
    pub decoder: TopDownDecoder,
    pub head: PredictionHead,
}

impl Stage1Model {
    pub fn new(p: &ParamPath<'_>, cfg: &ModelConfig, vocab_size: usize) -> Result<Self> {
        let enc_cfg = cfg.encoder();
        let text = TextEncoder::new(
            &p.pp("text"),
            TextEncoderConfig {
                vocab_size,
                max_len: cfg.max_len,
                dim: cfg.text_dim,
                layers: cfg.text_layers,
                heads: cfg.text_heads,
            },
        )?;
        let encoder = MultimodalEncoder::new(&p.pp("encoder"), enc_cfg)?;
        let channels: Vec<usize> = (0..cfg.blocks).map(|i| enc_cfg.channels(i)).collect();
        let decoder = TopDownDecoder::new(&p.pp("decoder"), &channels, cfg.c1)?;
        let head = PredictionHead::new(&p.pp("head"), cfg.c1, cfg.image_size)?;
        Ok(Self {
            text,
            encoder,
            decoder,
            head,
        })
    }

    pub fn stack_widths(&self) -> Vec<usize> {
        self.decoder.widths().to_vec()
    }

    /// `images` are `(B, 3, H, W)` with values in `[0, 1]`.
    pub fn forward(&self, images: &Tensor, tokens: &[TokenSequence]) -> Result<Stage1Output> {
        let lang = self.text.encode(tokens)?;
        let pyramid = self.encoder.forward(&to_signed(images)?, &lang)?;
        let stack = self.decoder.decode_pyramid(&pyramid)?;
        let prob = self.head.forward(&stack)?;
        Ok(Stage1Output {
            prob,
            stack,
            pyramid,
        })
    }
}

/// Maps `[0, 1]` pixel values to `[-1, 1]`.
pub fn to_signed(images: &Tensor) -> Result<Tensor> {
    Ok(images.affine(2.0, -1.0)?)
}

/// Fixed noise draw and step used to extract denoiser features at stage 2.
#[derive(Debug, Clone)]
pub struct FeatureNoise {
    pub t: usize,
    pub eps: Tensor,
}

impl FeatureNoise {
    pub fn new(seed: u64, t: usize, image_size: usize, dtype: DType, device: &Device) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let eps = crate::diffusion::standard_normal(&[1, 3, image_size, image_size], dtype, device, &mut rng)?;
        Ok(Self { t, eps })
    }
}

/// Everything needed to run both stages.
#[derive(Debug)]
pub struct FullModel {
    pub store: ParamStore,
    pub stage1: Stage1Model,
    pub denoiser: Denoiser,
    pub refiner: RefinementHead,
    pub schedule: NoiseSchedule,
    pub noise: FeatureNoise,
    pub config: RunConfig,
}

impl FullModel {
    /// Builds all parameters. Stage-1 weights are drawn first, so a stage-1 model
    /// built alone from the same seed has identical initial values.
    pub fn new(config: &RunConfig, vocab_size: usize, dtype: DType) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(dtype, config.seed);
        let stage1 = Stage1Model::new(&store.path(STAGE1_PREFIX), &config.model, vocab_size)?;
        let dcfg = config.denoiser();
        let denoiser = Denoiser::new(&store.path(DDPM_PREFIX), dcfg.clone())?;
        let level_widths: Vec<usize> = (0..dcfg.levels()).map(|n| dcfg.level_width(n)).collect::<Result<_>>()?;
        let enc = config.model.encoder();
        let channels: Vec<usize> = (0..enc.blocks).map(|i| enc.channels(i)).collect();
        let refiner = RefinementHead::new(
            &store.path(STAGE2_PREFIX),
            &config.stage2.level_selection,
            &decoded_widths(&channels, config.model.c1),
            &level_widths,
            enc.h1(),
            config.model.image_size,
            config.stage2.clamp_probability,
        )?;
        let d = &config.diffusion;
        let schedule = NoiseSchedule::linear(d.steps, d.beta_start, d.beta_end)?;
        let noise = FeatureNoise::new(d.noise_seed, d.t_infer, config.model.image_size, dtype, store.device())?;
        Ok(Self {
            store,
            stage1,
            denoiser,
            refiner,
            schedule,
            noise,
            config: config.clone(),
        })
    }

    /// Noised images `x_t` in the denoiser's signed range, shared noise across the batch.
    pub fn noised(&self, images: &Tensor) -> Result<Tensor> {
        let b = images.dim(0)?;
        let eps = self.noise.eps.repeat((b, 1, 1, 1))?;
        self.schedule.forward_noise(&to_signed(images)?, self.noise.t, &eps)
    }

    /// `H_seg` for a batch, given the stage-1 decoded stack.
    pub fn fused_features(&self, images: &Tensor, stack: &DecodedFeatureStack) -> Result<Tensor> {
        let x_t = self.noised(images)?;
        extract_and_fuse(&x_t, self.noise.t, &self.denoiser, &self.schedule, stack, &self.refiner)
    }

    /// Returns `(p_it, p_diff)`; `p_diff` is `None` when `diffusion` is off.
    pub fn predict(&self, images: &Tensor, tokens: &[TokenSequence], diffusion: bool) -> Result<(Tensor, Option<Tensor>)> {
        let out = self.stage1.forward(images, tokens)?;
        if !diffusion {
            return Ok((out.prob, None));
        }
        let h_seg = self.fused_features(images, &out.stack)?;
        let p_diff = self.refiner.refine(&h_seg, &out.prob, false)?;
        Ok((out.prob, Some(p_diff)))
    }
}

/// Images of a batch as `(B, 3, H, W)`.
pub fn image_batch(samples: &[&SampleRecord], dtype: DType, device: &Device) -> Result<Tensor> {
    let ts = samples
        .iter()
        .map(|s| s.image().to_tensor(dtype, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

/// Ground-truth masks of a batch as `(B, H, W)` zeros and ones.
pub fn mask_batch(samples: &[&SampleRecord], dtype: DType, device: &Device) -> Result<Tensor> {
    let ts = samples
        .iter()
        .map(|s| s.mask().to_tensor(dtype, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

pub fn token_batch(samples: &[&SampleRecord], vocab: &Vocabulary, max_len: usize) -> Vec<TokenSequence> {
    samples.iter().map(|s| tokenize(&s.instruction, vocab, max_len)).collect()
}
