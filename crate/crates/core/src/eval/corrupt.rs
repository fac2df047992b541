//! Common-corruption generation at five severities.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{disk_kernel, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    DefocusBlur,
    Brightness,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        Self::GaussianNoise,
        Self::ShotNoise,
        Self::DefocusBlur,
        Self::Brightness,
        Self::Contrast,
        Self::Pixelate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::GaussianNoise => "gaussian_noise",
            Self::ShotNoise => "shot_noise",
            Self::DefocusBlur => "defocus_blur",
            Self::Brightness => "brightness",
            Self::Contrast => "contrast",
            Self::Pixelate => "pixelate",
        }
    }

    /// Driving parameter per severity 1..=5.
    ///
    /// | kind | parameter | direction |
    /// |---|---|---|
    /// | gaussian_noise | noise std | increasing |
    /// | shot_noise | photons per unit intensity | decreasing |
    /// | defocus_blur | disk radius in pixels | increasing |
    /// | brightness | additive offset | increasing |
    /// | contrast | contrast factor | decreasing |
    /// | pixelate | kept resolution fraction | decreasing |
    pub fn parameters(self) -> [f32; 5] {
        match self {
            Self::GaussianNoise => [0.04, 0.06, 0.08, 0.09, 0.10],
            Self::ShotNoise => [500.0, 250.0, 100.0, 75.0, 50.0],
            Self::DefocusBlur => [0.5, 0.75, 1.0, 1.5, 2.0],
            Self::Brightness => [0.05, 0.1, 0.15, 0.2, 0.3],
            Self::Contrast => [0.75, 0.5, 0.4, 0.3, 0.15],
            Self::Pixelate => [0.75, 0.6, 0.5, 0.4, 0.25],
        }
    }

    /// Whether a larger parameter means a stronger corruption.
    pub fn increasing(self) -> bool {
        matches!(self, Self::GaussianNoise | Self::DefocusBlur | Self::Brightness)
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown corruption kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidArgument(format!("severity must be 1..=5, got {severity}")));
        }
        Ok(Self { kind, severity })
    }

    pub fn parameter(&self) -> f32 {
        self.kind.parameters()[self.severity as usize - 1]
    }
}

/// Corrupt one image; stochastic kinds draw from `rng`.
pub fn corrupt_image<R: Rng + ?Sized>(img: &Image, spec: &CorruptionSpec, rng: &mut R) -> Image {
    let p = spec.parameter();
    let mut out = match spec.kind {
        CorruptionKind::GaussianNoise => {
            let n = Normal::new(0.0f32, p).expect("positive std");
            let mut o = img.clone();
            o.data_mut().iter_mut().for_each(|v| *v += n.sample(rng));
            o
        }
        CorruptionKind::ShotNoise => {
            let mut o = img.clone();
            for v in o.data_mut() {
                let lambda = (v.clamp(0.0, 1.0) * p) as f64;
                let k = if lambda > 0.0 {
                    Poisson::new(lambda).expect("positive rate").sample(rng)
                } else {
                    0.0
                };
                *v = k as f32 / p;
            }
            o
        }
        CorruptionKind::DefocusBlur => {
            let (k, ksize) = disk_kernel(p);
            img.convolve(&k, ksize)
        }
        CorruptionKind::Brightness => {
            let mut o = img.clone();
            o.data_mut().iter_mut().for_each(|v| *v += p);
            o
        }
        CorruptionKind::Contrast => {
            let mean = img.mean();
            let mut o = img.clone();
            o.data_mut().iter_mut().for_each(|v| *v = (*v - mean) * p + mean);
            o
        }
        CorruptionKind::Pixelate => {
            let th = ((img.height() as f32 * p).round() as usize).max(1);
            let tw = ((img.width() as f32 * p).round() as usize).max(1);
            img.pixelate(th, tw)
        }
    };
    out.clamp01();
    out
}

pub fn corrupt_dataset<R: Rng + ?Sized>(images: &[&Image], spec: &CorruptionSpec, rng: &mut R) -> Vec<Image> {
    images.iter().map(|img| corrupt_image(img, spec, rng)).collect()
}
