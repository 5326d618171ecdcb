//! Planar float images.
//!
//! Pixels live in `[0, 1]` on the host side. The diffusion model works on
//! `[-1, 1]` tensors of shape `(1, C, H, W)`; [`Image::to_model_tensor`] and
//! [`Image::from_model_tensor`] convert between the two.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Channel-planar (`C x H x W`, row-major) float image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "image buffer has {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "image {}x{}x{} vs {}x{}x{}",
                self.channels, self.height, self.width, other.channels, other.height, other.width
            )))
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn clamped(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Luma with Rec. 601 weights; the weights sum to one.
    pub fn grayscale(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.height * self.width;
        let mut out = vec![0f32; n];
        let weights = [0.299f32, 0.587, 0.114];
        for (c, w) in weights.iter().enumerate().take(self.channels.min(3)) {
            for (o, v) in out.iter_mut().zip(self.plane(c)) {
                *o += w * v;
            }
        }
        Image {
            channels: 1,
            height: self.height,
            width: self.width,
            data: out,
        }
    }

    /// Area-average downsample to `(out_h, out_w)`. Dimensions must divide evenly.
    pub fn downsample(&self, out_h: usize, out_w: usize) -> Result<Image> {
        if out_h == 0 || out_w == 0 || self.height % out_h != 0 || self.width % out_w != 0 {
            return Err(Error::shape(format!(
                "cannot area-downsample {}x{} to {out_h}x{out_w}",
                self.height, self.width
            )));
        }
        let (fy, fx) = (self.height / out_h, self.width / out_w);
        let norm = 1.0 / (fy * fx) as f32;
        let mut out = Image::filled(self.channels, out_h, out_w, 0.0);
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    let v = out.get(c, y / fy, x / fx) + self.get(c, y, x) * norm;
                    out.set(c, y / fy, x / fx, v);
                }
            }
        }
        Ok(out)
    }

    /// `(1, C, H, W)` tensor scaled to `[-1, 1]`.
    pub fn to_model_tensor(&self, device: &Device) -> Result<Tensor> {
        let scaled: Vec<f32> = self.data.iter().map(|v| v * 2.0 - 1.0).collect();
        Ok(Tensor::from_vec(
            scaled,
            (1, self.channels, self.height, self.width),
            device,
        )?)
    }

    /// `(1, C, H, W)` tensor with the raw `[0, 1]` values (used for depth maps).
    pub fn to_unit_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.data.clone(),
            (1, self.channels, self.height, self.width),
            device,
        )?)
    }

    /// Inverse of [`Image::to_model_tensor`]; accepts `(1, C, H, W)` or `(C, H, W)`.
    /// Values are not clamped.
    pub fn from_model_tensor(t: &Tensor) -> Result<Image> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::shape(format!("expected rank 3 or 4 tensor, got {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        let data: Vec<f32> = t
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| (v + 1.0) * 0.5)
            .collect();
        Image::new(c, h, w, data)
    }
}

/// Peak signal-to-noise ratio in dB for `[0, 1]` images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = (*x as f64) - (*y as f64);
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_is_lossless_enough() {
        let img = Image::new(3, 2, 2, (0..12).map(|v| v as f32 / 11.0).collect()).unwrap();
        let t = img.to_model_tensor(&Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 2, 2]);
        let back = Image::from_model_tensor(&t).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn downsample_averages_blocks() {
        let img = Image::new(1, 2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let d = img.downsample(1, 1).unwrap();
        assert_eq!(d.data(), &[0.5]);
        assert!(img.downsample(3, 1).is_err());
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let img = Image::filled(3, 4, 4, 0.3);
        assert!(psnr(&img, &img).unwrap().is_infinite());
        let other = img.map(|v| v + 0.1);
        assert!((psnr(&img, &other).unwrap() - 20.0).abs() < 1e-4);
    }
}
