//! Raster containers shared by the dataset, model and metric code.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// RGB image stored row-major as `height × width × 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel-first tensor of shape `(3, H, W)`.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, 3), device)?;
        Ok(t.permute((2, 0, 1))?.contiguous()?.to_dtype(dtype)?)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| shape_err!("image buffer does not match {}x{}", self.height, self.width))?;
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self {
            height: h as usize,
            width: w as usize,
            data: img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect(),
        })
    }
}

/// Inclusive pixel rectangle `(x_min, y_min, x_max, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

/// Binary mask stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Tight bounding box of the foreground, `None` when empty.
    pub fn bbox(&self) -> Option<BBox> {
        let mut bb: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(y, x) {
                    continue;
                }
                bb = Some(match bb {
                    None => BBox {
                        x_min: x,
                        y_min: y,
                        x_max: x,
                        y_max: y,
                    },
                    Some(b) => BBox {
                        x_min: b.x_min.min(x),
                        y_min: b.y_min.min(y),
                        x_max: b.x_max.max(x),
                        y_max: b.y_max.max(y),
                    },
                });
            }
        }
        bb
    }

    /// `(H, W)` tensor of zeros and ones.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Ok(Tensor::from_vec(v, (self.height, self.width), device)?.to_dtype(dtype)?)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| shape_err!("mask buffer does not match {}x{}", self.height, self.width))?;
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        Ok(Self {
            height: h as usize,
            width: w as usize,
            data: img.into_raw().into_iter().map(|b| b >= 128).collect(),
        })
    }
}

/// Which stage produced a probability map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Intermediate,
    Diffusion,
}

/// Per-pixel foreground probability, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub stage: Stage,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>, stage: Stage) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err!(
                "probability map of {} values for {height}x{width}",
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("probability {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
            stage,
        })
    }

    /// Builds a map from an `(H, W)` tensor of any float dtype.
    pub fn from_tensor(t: &Tensor, stage: Stage) -> Result<Self> {
        let (h, w) = t.dims2()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(h, w, data, stage)
    }

    /// Foreground iff `p > 0.5`; a pixel at exactly 0.5 is background.
    pub fn binarize(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&p| p > 0.5).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|p| (p * 255.0).round() as u8).collect();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| shape_err!("probability buffer does not match"))?;
        buf.save(path)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: f32) -> ProbabilityMap {
        ProbabilityMap::new(2, 2, vec![v; 4], Stage::Intermediate).unwrap()
    }

    #[test]
    fn binarize_threshold_is_strict() {
        assert_eq!(map(0.4).binarize().count(), 0);
        assert_eq!(map(0.6).binarize().count(), 4);
        assert_eq!(map(0.5).binarize().count(), 0);
    }

    #[test]
    fn binarize_round_trip_is_idempotent() {
        let p = ProbabilityMap::new(1, 4, vec![0.1, 0.5, 0.51, 0.99], Stage::Diffusion).unwrap();
        let once = p.binarize();
        let back = ProbabilityMap::new(
            1,
            4,
            once.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            Stage::Diffusion,
        )
        .unwrap();
        assert_eq!(back.binarize(), once);
    }

    #[test]
    fn rejects_out_of_range_probability() {
        assert!(ProbabilityMap::new(1, 1, vec![1.5], Stage::Intermediate).is_err());
        assert!(ProbabilityMap::new(1, 2, vec![0.5], Stage::Intermediate).is_err());
    }

    #[test]
    fn bbox_of_mask() {
        let m = BinaryMask::from_fn(5, 5, |y, x| (1..=2).contains(&y) && (2..=4).contains(&x));
        assert_eq!(
            m.bbox(),
            Some(BBox {
                x_min: 2,
                y_min: 1,
                x_max: 4,
                y_max: 2
            })
        );
        assert_eq!(BinaryMask::empty(3, 3).bbox(), None);
    }

    #[test]
    fn png_round_trip_is_lossless_on_byte_grid() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::filled(3, 4, [0.0, 0.5, 1.0]);
        img.set_pixel(1, 2, [10.0 / 255.0, 200.0 / 255.0, 33.0 / 255.0]);
        let img = Image {
            data: img.data.iter().map(|v| (v * 255.0).round() / 255.0).collect(),
            ..img
        };
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p).unwrap(), img);

        let m = BinaryMask::from_fn(3, 4, |y, x| (x + y) % 2 == 0);
        let p = dir.path().join("m.png");
        m.save_png(&p).unwrap();
        assert_eq!(BinaryMask::load_png(&p).unwrap(), m);
    }
}
