//! Planar RGB images with values in `[0, 1]` and the pixel-level filters shared
//! by style distortions, naturalistic augmentation and corruptions.

use std::hash::{Hash, Hasher};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel-major (`C x H x W`) image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "image buffer of {} values does not match {channels}x{height}x{width}",
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

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
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

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
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

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn mean(&self) -> f32 {
        self.data.iter().sum::<f32>() / self.data.len() as f32
    }

    /// Bit-level fingerprint used for immutability checks.
    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.dims().hash(&mut h);
        for v in &self.data {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    /// ITU-R 601 luma, replicated over the RGB channels.
    pub fn grayscale(&self) -> Image {
        if self.channels != 3 {
            return self.clone();
        }
        let n = self.height * self.width;
        let mut out = self.clone();
        for i in 0..n {
            let l = 0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i];
            out.data[i] = l;
            out.data[n + i] = l;
            out.data[2 * n + i] = l;
        }
        out
    }

    /// Convolve every channel with a 2-D kernel (odd side length), reflecting at borders.
    pub fn convolve(&self, kernel: &[f32], ksize: usize) -> Image {
        debug_assert_eq!(kernel.len(), ksize * ksize);
        let r = (ksize / 2) as isize;
        let mut out = self.clone();
        let (h, w) = (self.height as isize, self.width as isize);
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for ky in 0..ksize as isize {
                        let sy = reflect(y + ky - r, h);
                        for kx in 0..ksize as isize {
                            let sx = reflect(x + kx - r, w);
                            acc += kernel[(ky as usize) * ksize + kx as usize]
                                * self.at(c, sy as usize, sx as usize);
                        }
                    }
                    out.set(c, y as usize, x as usize, acc);
                }
            }
        }
        out
    }

    /// Box-downsample to `(th, tw)` then nearest-upsample back to the original size.
    pub fn pixelate(&self, th: usize, tw: usize) -> Image {
        let (th, tw) = (th.max(1), tw.max(1));
        let mut small = vec![0.0f32; self.channels * th * tw];
        for c in 0..self.channels {
            for sy in 0..th {
                let y0 = sy * self.height / th;
                let y1 = ((sy + 1) * self.height / th).max(y0 + 1);
                for sx in 0..tw {
                    let x0 = sx * self.width / tw;
                    let x1 = ((sx + 1) * self.width / tw).max(x0 + 1);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            acc += self.at(c, y, x);
                        }
                    }
                    small[(c * th + sy) * tw + sx] = acc / ((y1 - y0) * (x1 - x0)) as f32;
                }
            }
        }
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                let sy = y * th / self.height;
                for x in 0..self.width {
                    let sx = x * tw / self.width;
                    out.set(c, y, x, small[(c * th + sy) * tw + sx]);
                }
            }
        }
        out
    }

    pub fn mse(&self, other: &Image) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            / self.data.len() as f32
    }

    /// Peak signal-to-noise ratio in dB for unit peak.
    pub fn psnr(&self, other: &Image) -> f32 {
        let mse = self.mse(other);
        if mse == 0.0 {
            f32::INFINITY
        } else {
            -10.0 * mse.log10()
        }
    }
}

fn reflect(i: isize, n: isize) -> isize {
    if n == 1 {
        return 0;
    }
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i
}

/// Normalized isotropic Gaussian kernel.
pub fn gaussian_kernel(ksize: usize, sigma: f32) -> Vec<f32> {
    let r = (ksize / 2) as f32;
    let mut k: Vec<f32> = (0..ksize * ksize)
        .map(|i| {
            let dy = (i / ksize) as f32 - r;
            let dx = (i % ksize) as f32 - r;
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Normalized anti-aliased disk kernel of the given radius.
pub fn disk_kernel(radius: f32) -> (Vec<f32>, usize) {
    let r = radius.ceil() as usize;
    let ksize = 2 * r + 1;
    let mut k = vec![0.0f32; ksize * ksize];
    // 4x4 supersampling for the disk coverage
    for ky in 0..ksize {
        for kx in 0..ksize {
            let mut cover = 0.0;
            for sy in 0..4 {
                for sx in 0..4 {
                    let dy = ky as f32 - r as f32 + (sy as f32 + 0.5) / 4.0 - 0.5;
                    let dx = kx as f32 - r as f32 + (sx as f32 + 0.5) / 4.0 - 0.5;
                    if dx * dx + dy * dy <= radius * radius {
                        cover += 1.0 / 16.0;
                    }
                }
            }
            k[ky * ksize + kx] = cover;
        }
    }
    let s: f32 = k.iter().sum();
    if s == 0.0 {
        k[r * ksize + r] = 1.0;
    } else {
        k.iter_mut().for_each(|v| *v /= s);
    }
    (k, ksize)
}

/// Stack images into an `(N, C, H, W)` f32 tensor.
pub fn images_to_tensor<'a, I>(images: I, device: &Device) -> Result<Tensor>
where
    I: IntoIterator<Item = &'a Image>,
{
    let mut data = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for img in images {
        match dims {
            None => dims = Some(img.dims()),
            Some(d) if d != img.dims() => {
                return Err(Error::Shape(format!(
                    "batch mixes image shapes {d:?} and {:?}",
                    img.dims()
                )))
            }
            _ => {}
        }
        data.extend_from_slice(&img.data);
        n += 1;
    }
    let (c, h, w) = dims.ok_or(Error::Empty("image batch"))?;
    Ok(Tensor::from_vec(data, (n, c, h, w), device)?)
}

/// Split an `(N, C, H, W)` tensor back into images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (n, c, h, w) = t.dims4()?;
    let flat: Vec<f32> = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
    let per = c * h * w;
    Ok((0..n)
        .map(|i| Image {
            channels: c,
            height: h,
            width: w,
            data: flat[i * per..(i + 1) * per].to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let a = Image::new(3, 2, 2, (0..12).map(|v| v as f32 / 12.0).collect()).unwrap();
        let b = Image::filled(3, 2, 2, 0.25);
        let t = images_to_tensor([&a, &b], &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 3, 2, 2]);
        assert_eq!(tensor_to_images(&t).unwrap(), vec![a, b]);
    }

    #[test]
    fn kernels_are_normalized() {
        let g = gaussian_kernel(3, 1.0);
        assert!((g.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        let (d, k) = disk_kernel(1.5);
        assert_eq!(k, 5);
        assert!((d.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_image_is_fixed_by_filters() {
        let img = Image::filled(3, 6, 6, 0.4);
        let blurred = img.convolve(&gaussian_kernel(3, 0.8), 3);
        assert!(blurred.mse(&img) < 1e-12);
        assert!(img.pixelate(2, 2).mse(&img) < 1e-12);
    }

    #[test]
    fn mismatched_buffer_rejected() {
        assert!(Image::new(3, 2, 2, vec![0.0; 11]).is_err());
    }
}
