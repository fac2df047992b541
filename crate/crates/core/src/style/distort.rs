//! Photometric style distortions: colour jitter, grayscale, Gaussian blur and
//! Gaussian noise, each applied with its own probability in that order.
//!
//! The same operator drives the naturalistic-augmentation baseline, where it
//! is applied to training images instead of style images.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{gaussian_kernel, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterStrengths {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

impl Default for JitterStrengths {
    fn default() -> Self {
        Self {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistortionConfig {
    pub jitter_prob: f32,
    pub gray_prob: f32,
    pub blur_prob: f32,
    pub noise_prob: f32,
    pub noise_std: f32,
    /// Blur kernel side as a fraction of the image width.
    pub blur_kernel_frac: f32,
    /// Range the blur sigma is drawn from.
    pub blur_sigma: (f32, f32),
    pub jitter_strengths: JitterStrengths,
}

impl Default for DistortionConfig {
    /// Colour jitter 80%, grayscale 20%, noise std 0.025 at 50%, blur with a
    /// kernel of 10% of the width at 50%.
    fn default() -> Self {
        Self {
            jitter_prob: 0.8,
            gray_prob: 0.2,
            blur_prob: 0.5,
            noise_prob: 0.5,
            noise_std: 0.025,
            blur_kernel_frac: 0.1,
            blur_sigma: (0.1, 2.0),
            jitter_strengths: JitterStrengths::default(),
        }
    }
}

impl DistortionConfig {
    /// Every operation disabled.
    pub fn identity() -> Self {
        Self {
            jitter_prob: 0.0,
            gray_prob: 0.0,
            blur_prob: 0.0,
            noise_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("jitter_prob", self.jitter_prob),
            ("gray_prob", self.gray_prob),
            ("blur_prob", self.blur_prob),
            ("noise_prob", self.noise_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        if !(self.blur_kernel_frac > 0.0 && self.blur_kernel_frac <= 1.0) {
            return Err(Error::Config("blur_kernel_frac must lie in (0, 1]".into()));
        }
        let (lo, hi) = self.blur_sigma;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config("blur_sigma must be a positive increasing range".into()));
        }
        let j = &self.jitter_strengths;
        if [j.brightness, j.contrast, j.saturation].iter().any(|v| !(0.0..=1.0).contains(v))
            || !(0.0..=0.5).contains(&j.hue)
        {
            return Err(Error::Config("jitter strengths out of range".into()));
        }
        Ok(())
    }

    /// Odd kernel side for an image of the given width.
    pub fn blur_kernel_size(&self, width: usize) -> usize {
        let k = (self.blur_kernel_frac * width as f32).ceil().max(1.0) as usize;
        if k % 2 == 0 {
            k + 1
        } else {
            k
        }
    }
}

/// Apply jitter, grayscale, blur and noise, each with its probability.
/// The Bernoulli draws happen in that fixed order for every call so the
/// random stream stays aligned across images.
pub fn distort_style<R: Rng + ?Sized>(style: &Image, config: &DistortionConfig, rng: &mut R) -> Image {
    let mut img = style.clone();
    if rng.random::<f32>() < config.jitter_prob {
        img = color_jitter(&img, &config.jitter_strengths, rng);
    }
    if rng.random::<f32>() < config.gray_prob {
        img = img.grayscale();
    }
    if rng.random::<f32>() < config.blur_prob {
        let k = config.blur_kernel_size(img.width());
        let (lo, hi) = config.blur_sigma;
        let sigma = if hi > lo { rng.random_range(lo..hi) } else { lo };
        if k > 1 {
            img = img.convolve(&gaussian_kernel(k, sigma), k);
        }
    }
    if rng.random::<f32>() < config.noise_prob && config.noise_std > 0.0 {
        let noise = Normal::new(0.0f32, config.noise_std).expect("validated std");
        for v in img.data_mut() {
            *v += noise.sample(rng);
        }
        img.clamp01();
    }
    img
}

fn factor<R: Rng + ?Sized>(strength: f32, rng: &mut R) -> f32 {
    if strength > 0.0 {
        rng.random_range(1.0 - strength..1.0 + strength)
    } else {
        1.0
    }
}

/// Brightness, contrast, saturation and hue adjustments in a fixed order.
pub fn color_jitter<R: Rng + ?Sized>(img: &Image, s: &JitterStrengths, rng: &mut R) -> Image {
    let b = factor(s.brightness, rng);
    let c = factor(s.contrast, rng);
    let sat = factor(s.saturation, rng);
    let hue = if s.hue > 0.0 { rng.random_range(-s.hue..s.hue) } else { 0.0 };
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v * b).clamp(0.0, 1.0);
    }
    if out.channels() != 3 {
        return out;
    }
    let gray_mean = out.grayscale().mean();
    for v in out.data_mut() {
        *v = (gray_mean + (*v - gray_mean) * c).clamp(0.0, 1.0);
    }
    let gray = out.grayscale();
    for (v, g) in out.data_mut().iter_mut().zip(gray.data()) {
        *v = (g + (*v - g) * sat).clamp(0.0, 1.0);
    }
    if hue != 0.0 {
        let n = out.height() * out.width();
        let d = out.data_mut();
        for i in 0..n {
            let (h, s, v) = rgb_to_hsv(d[i], d[n + i], d[2 * n + i]);
            let (r, g, b) = hsv_to_rgb((h + hue).rem_euclid(1.0), s, v);
            d[i] = r;
            d[n + i] = g;
            d[2 * n + i] = b;
        }
    }
    out
}

pub(crate) fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

pub(crate) fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}
