use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{resize_bilinear, Conv2d, Linear, ParamPath};

use super::NoiseSchedule;

/// Geometry of the noise-prediction UNet. `widths[k]` is the channel count at
/// resolution `image_size / 2^k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub widths: Vec<usize>,
    pub time_dim: usize,
    /// Resolution index of feature level 0; level `n` sits at `widths[n + level_offset]`.
    pub level_offset: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            widths: vec![8, 16, 32, 64, 128, 256],
            time_dim: 32,
            level_offset: 2,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.widths.len();
        if k < 2 {
            return Err(Error::Config("denoiser needs at least two resolutions".into()));
        }
        if self.image_size % (1 << (k - 1)) != 0 {
            return Err(Error::Config(format!(
                "image size {} cannot be halved {} times",
                self.image_size,
                k - 1
            )));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config("time embedding width must be even".into()));
        }
        if self.level_offset >= k {
            return Err(Error::Config("level offset beyond the deepest resolution".into()));
        }
        Ok(())
    }

    /// Number of feature levels exposed for fusion.
    pub fn levels(&self) -> usize {
        self.widths.len() - self.level_offset
    }

    pub fn level_width(&self, level: usize) -> Result<usize> {
        self.widths
            .get(level + self.level_offset)
            .copied()
            .ok_or_else(|| Error::Config(format!("denoiser has no level {level}")))
    }
}

/// Sinusoidal embedding of integer steps, `(B, dim)`.
pub fn timestep_embedding(steps: &[usize], dim: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            v.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            v.push((t as f64 * freq).cos());
        }
    }
    Ok(Tensor::from_vec(v, (steps.len(), dim), device)?.to_dtype(dtype)?)
}

/// Predicted noise plus every internal activation, indexed by resolution.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub eps: Tensor,
    pub encoder: Vec<Tensor>,
    pub decoder: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    input: Conv2d,
    down: Vec<(Conv2d, Conv2d)>,
    mid: Conv2d,
    up: Vec<Conv2d>,
    output: Conv2d,
    time_mlp: Linear,
    enc_time: Vec<Linear>,
    dec_time: Vec<Linear>,
    config: DenoiserConfig,
}

impl Denoiser {
    pub fn new(p: &ParamPath<'_>, config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let w = &config.widths;
        let k = w.len();
        let hidden = 2 * config.time_dim;
        let down = (1..k)
            .map(|i| {
                let dp = p.pp(format!("down{i}"));
                Ok((Conv2d::down3(&dp.pp("down"), w[i - 1], w[i])?, Conv2d::same3(&dp.pp("conv"), w[i], w[i])?))
            })
            .collect::<Result<Vec<_>>>()?;
        let up = (0..k - 1)
            .map(|i| Conv2d::same3(&p.pp(format!("up{i}")), w[i + 1] + w[i], w[i]))
            .collect::<Result<Vec<_>>>()?;
        let enc_time = (0..k)
            .map(|i| Linear::new(&p.pp(format!("enc_time{i}")), hidden, w[i]))
            .collect::<Result<Vec<_>>>()?;
        let dec_time = (0..k)
            .map(|i| Linear::new(&p.pp(format!("dec_time{i}")), hidden, w[i]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            input: Conv2d::same3(&p.pp("input"), 3, w[0])?,
            down,
            mid: Conv2d::same3(&p.pp("mid"), w[k - 1], w[k - 1])?,
            up,
            output: Conv2d::pointwise(&p.pp("output"), w[0], 3)?,
            time_mlp: Linear::new(&p.pp("time_mlp"), config.time_dim, hidden)?,
            enc_time,
            dec_time,
            config,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn forward(&self, x_t: &Tensor, steps: &[usize]) -> Result<DenoiserOutput> {
        let (b, c, h, w) = x_t.dims4()?;
        let size = self.config.image_size;
        if c != 3 || h != size || w != size {
            return Err(shape_err!("denoiser expects (B, 3, {size}, {size}), got {:?}", x_t.dims()));
        }
        if steps.len() != b {
            return Err(shape_err!("{} steps for a batch of {b}", steps.len()));
        }
        let temb = timestep_embedding(steps, self.config.time_dim, x_t.dtype(), x_t.device())?;
        let temb = self.time_mlp.forward(&temb)?.relu()?;
        let add_time = |x: Tensor, lin: &Linear| -> Result<Tensor> {
            let ch = x.dim(1)?;
            Ok(x.broadcast_add(&lin.forward(&temb)?.reshape((b, ch, 1, 1))?)?)
        };

        let mut encoder = Vec::with_capacity(self.config.widths.len());
        encoder.push(add_time(self.input.forward(x_t)?, &self.enc_time[0])?.relu()?);
        for (i, (down, conv)) in self.down.iter().enumerate() {
            let hdn = add_time(down.forward(encoder.last().unwrap())?, &self.enc_time[i + 1])?.relu()?;
            encoder.push(conv.forward(&hdn)?.relu()?);
        }

        let k = encoder.len();
        let mut decoder = vec![add_time(self.mid.forward(&encoder[k - 1])?, &self.dec_time[k - 1])?.relu()?];
        for i in (0..k - 1).rev() {
            let (_, _, hh, ww) = encoder[i].dims4()?;
            let up = resize_bilinear(decoder.last().unwrap(), hh, ww)?;
            let cat = Tensor::cat(&[&up, &encoder[i]], 1)?;
            decoder.push(add_time(self.up[i].forward(&cat)?, &self.dec_time[i])?.relu()?);
        }
        decoder.reverse();
        let eps = self.output.forward(&decoder[0])?;
        Ok(DenoiserOutput {
            eps,
            encoder,
            decoder,
        })
    }

    /// Per-level clean-signal analogs `(enc - sqrt(1 - abar_t) dec) / sqrt(abar_t)`
    /// for the requested feature levels, in the given order.
    pub fn level_estimates(
        &self,
        out: &DenoiserOutput,
        schedule: &NoiseSchedule,
        t: usize,
        levels: &[usize],
    ) -> Result<Vec<Tensor>> {
        levels
            .iter()
            .map(|&n| {
                let k = n + self.config.level_offset;
                if k >= out.encoder.len() {
                    return Err(Error::Config(format!("denoiser has no level {n}")));
                }
                schedule.estimate_x0(&out.encoder[k], t, &out.decoder[k])
            })
            .collect()
    }
}

/// Mean squared error between injected and predicted noise.
pub fn noise_prediction_loss(eps_hat: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if eps_hat.dims() != eps.dims() {
        return Err(shape_err!("noise {:?} vs prediction {:?}", eps.dims(), eps_hat.dims()));
    }
    Ok((eps_hat - eps)?.sqr()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::Device;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            image_size: 16,
            widths: vec![4, 6, 8, 10],
            time_dim: 8,
            level_offset: 1,
        }
    }

    #[test]
    fn activation_geometry() {
        let store = ParamStore::new(DType::F32, 0);
        let den = Denoiser::new(&store.root(), DenoiserConfig::default()).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 3, 64, 64), &Device::Cpu).unwrap();
        let out = den.forward(&x, &[3, 50]).unwrap();
        assert_eq!(out.eps.dims(), [2, 3, 64, 64]);
        for (k, (e, d)) in out.encoder.iter().zip(&out.decoder).enumerate() {
            let want = [2, 8 << k, 64 >> k, 64 >> k];
            assert_eq!(e.dims(), want);
            assert_eq!(d.dims(), want);
        }
        let widths: Vec<usize> = (0..4).map(|n| den.config().level_width(n).unwrap()).collect();
        assert_eq!(widths, [32, 64, 128, 256]);
    }

    #[test]
    fn zero_weights_predict_zero_noise() {
        let store = ParamStore::new(DType::F64, 1);
        let den = Denoiser::new(&store.root(), tiny()).unwrap();
        store.zero_prefix("").unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let out = den.forward(&x, &[7]).unwrap();
        let m = out.eps.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(m, 0.0);
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let eps = Tensor::randn(0f32, 1.0, (2, 3, 4, 4), &Device::Cpu).unwrap();
        let loss = noise_prediction_loss(&eps, &eps).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn timestep_embedding_is_bounded() {
        let e = timestep_embedding(&[1, 50, 100], 16, DType::F64, &Device::Cpu).unwrap();
        assert_eq!(e.dims(), [3, 16]);
        let v: Vec<f64> = e.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|x| x.abs() <= 1.0));
    }

    #[test]
    fn rejects_wrong_step_count() {
        let store = ParamStore::new(DType::F32, 0);
        let den = Denoiser::new(&store.root(), tiny()).unwrap();
        let x = Tensor::zeros((2, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(den.forward(&x, &[1]).is_err());
    }
}
