//! Minimal parameter store, initializers and optimizers over candle tensors.

use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Named trainable tensors, iterated in name order for reproducibility.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        self.params.insert(name.into(), Var::from_tensor(&value)?);
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing"))
            .as_tensor()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Copy every tensor into fresh storage.
    pub fn deep_copy(&self) -> Result<Self> {
        let mut out = ParamStore::new();
        for (name, var) in &self.params {
            out.insert(name.clone(), var.as_tensor().copy()?)?;
        }
        Ok(out)
    }

    /// Fingerprint over names, shapes and exact bit patterns.
    pub fn checksum(&self) -> Result<u64> {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, var) in &self.params {
            name.hash(&mut h);
            var.dims().hash(&mut h);
            let flat: Vec<f32> = var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
            for v in flat {
                v.to_bits().hash(&mut h);
            }
        }
        Ok(h.finish())
    }

    pub fn to_tensors(&self) -> HashMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        candle_core::safetensors::save(&self.to_tensors(), path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
        let mut out = ParamStore::new();
        for (k, v) in tensors {
            out.insert(k, v)?;
        }
        Ok(out)
    }
}

pub fn normal_tensor<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0f32, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let data: Vec<f32> = (0..n).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
}

/// He-normal weights for a `(out, in, k, k)` convolution.
pub fn conv_weight<R: Rng + ?Sized>(out_c: usize, in_c: usize, k: usize, gain: f32, rng: &mut R) -> Result<Tensor> {
    let std = gain * (2.0 / (in_c * k * k) as f32).sqrt();
    normal_tensor(&[out_c, in_c, k, k], std, rng)
}

pub fn zeros(n: usize) -> Result<Tensor> {
    Ok(Tensor::zeros(n, DType::F32, &Device::Cpu)?)
}

/// 3x3-style convolution with "same" padding plus per-channel bias.
pub fn conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    let k = w.dim(3)?;
    let y = x.conv2d(w, k / 2, stride, 1, 1)?;
    let c = b.dim(0)?;
    Ok(y.broadcast_add(&b.reshape((1, c, 1, 1))?)?)
}

pub fn ones(n: usize) -> Result<Tensor> {
    Ok(Tensor::ones(n, DType::F32, &Device::Cpu)?)
}

/// Number of GroupNorm groups for `c` channels: 4 when it divides, else fewer.
pub fn norm_groups(c: usize) -> usize {
    [4, 2, 1].into_iter().find(|g| c % g == 0).unwrap_or(1)
}

/// Per-sample group normalization of an `(N, C, H, W)` tensor followed by a
/// per-channel affine map. No batch statistics are involved.
pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Shape(format!("{c} channels cannot form {groups} groups")));
    }
    let xg = x.reshape((n, groups, (c / groups) * h * w))?;
    let centered = xg.broadcast_sub(&xg.mean_keepdim(2)?)?;
    let std = (centered.sqr()?.mean_keepdim(2)? + 1e-5)?.sqrt()?;
    let y = centered.broadcast_div(&std)?.reshape((n, c, h, w))?;
    Ok(y
        .broadcast_mul(&gamma.reshape((1, c, 1, 1))?)?
        .broadcast_add(&beta.reshape((1, c, 1, 1))?)?)
}

/// SGD with heavy-ball momentum and L2 weight decay, applied as
/// `v <- mu * v + (g + wd * w); w <- w - lr * v`.
#[derive(Debug, Default)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale the whole gradient when its global L2 norm exceeds this.
    pub max_grad_norm: Option<f64>,
    velocity: HashMap<String, Tensor>,
}

impl SgdMomentum {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            max_grad_norm: None,
            velocity: HashMap::new(),
        }
    }

    pub fn with_max_grad_norm(mut self, max_norm: Option<f64>) -> Self {
        self.max_grad_norm = max_norm;
        self
    }

    fn clip_factor(&self, params: &ParamStore, grads: &candle_core::backprop::GradStore) -> Result<f64> {
        let Some(max) = self.max_grad_norm else { return Ok(1.0) };
        let mut sq = 0.0f64;
        for (_, var) in params.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        Ok(if norm > max { max / norm } else { 1.0 })
    }

    pub fn step(&mut self, params: &ParamStore, grads: &candle_core::backprop::GradStore, lr: f64) -> Result<()> {
        let clip = self.clip_factor(params, grads)?;
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // detached so optimizer state never chains graphs across steps
            let w = var.as_tensor().detach();
            let g = if clip < 1.0 { (g.detach() * clip)? } else { g.detach() };
            let g = if self.weight_decay > 0.0 {
                (g + (&w * self.weight_decay)?)?
            } else {
                g
            };
            let v = match self.velocity.get(name) {
                Some(prev) if prev.dims() == g.dims() => ((prev * self.momentum)? + g)?,
                _ => g,
            };
            var.set(&(w - (&v * lr)?)?)?;
            self.velocity.insert(name.clone(), v);
        }
        Ok(())
    }
}

/// Adam, used for the style decoder.
#[derive(Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &ParamStore, grads: &candle_core::backprop::GradStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = &g.detach();
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (
                    ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                    ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                ),
                None => ((g * (1.0 - self.beta1))?, (g.sqr()? * (1.0 - self.beta2))?),
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * self.lr)?)?)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn sgd_momentum_matches_hand_computation() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[1.0f32, -2.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = SgdMomentum::new(0.9, 0.0);
        for _ in 0..2 {
            let loss = p.tensor("w").sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&p, &grads, 0.1).unwrap();
        }
        // step 1: g = 2w = (2,-4), v = g, w = (0.8, -1.6)
        // step 2: g = (1.6,-3.2), v = 0.9*(2,-4) + g = (3.4,-6.8), w = (0.46, -0.92)
        let w: Vec<f32> = p.tensor("w").to_vec1().unwrap();
        assert!((w[0] - 0.46).abs() < 1e-6 && (w[1] + 0.92).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn group_norm_standardizes_each_group_per_sample() {
        let x = normal_tensor(&[3, 8, 4, 4], 2.0, &mut crate::rng::substream(1, "gn", 0)).unwrap();
        let x = (x + 5.0).unwrap();
        let y = group_norm(&x, 4, &ones(8).unwrap(), &zeros(8).unwrap()).unwrap();
        let g = y.reshape((3, 4, 32)).unwrap();
        let mean: Vec<Vec<f32>> = g.mean(2).unwrap().to_vec2().unwrap();
        let var: Vec<Vec<f32>> = g.sqr().unwrap().mean(2).unwrap().to_vec2().unwrap();
        for (m, v) in mean.iter().flatten().zip(var.iter().flatten()) {
            assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-3, "{m} {v}");
        }
        // rows are normalized independently of the rest of the batch
        let single = group_norm(&x.narrow(0, 1, 1).unwrap(), 4, &ones(8).unwrap(), &zeros(8).unwrap()).unwrap();
        let row: Vec<f32> = y.narrow(0, 1, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(single.flatten_all().unwrap().to_vec1::<f32>().unwrap(), row);
        assert!(group_norm(&x, 3, &ones(8).unwrap(), &zeros(8).unwrap()).is_err());
    }

    #[test]
    fn gradient_clipping_rescales_global_norm() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[1.0f32, -2.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = SgdMomentum::new(0.9, 0.0).with_max_grad_norm(Some(1.0));
        let loss = p.tensor("w").sqr().unwrap().sum_all().unwrap();
        opt.step(&p, &loss.backward().unwrap(), 0.1).unwrap();
        // g = (2,-4) has norm sqrt(20); the applied step is 0.1 * g / sqrt(20)
        let k = 0.1 / 20f32.sqrt();
        let w: Vec<f32> = p.tensor("w").to_vec1().unwrap();
        assert!((w[0] - (1.0 - 2.0 * k)).abs() < 1e-6 && (w[1] - (-2.0 + 4.0 * k)).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn deep_copy_is_isolated() {
        let mut p = ParamStore::new();
        p.insert("a", conv_weight(2, 1, 3, 1.0, &mut substream(0, "x", 0)).unwrap()).unwrap();
        let q = p.deep_copy().unwrap();
        let before = q.checksum().unwrap();
        p.get("a").unwrap().set(&p.tensor("a").zeros_like().unwrap()).unwrap();
        assert_eq!(q.checksum().unwrap(), before);
        assert_ne!(p.checksum().unwrap(), before);
    }

    #[test]
    fn safetensors_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamStore::new();
        p.insert("b", Tensor::new(&[0.5f32, 1.5], &Device::Cpu).unwrap()).unwrap();
        let path = dir.path().join("p.safetensors");
        p.save(&path).unwrap();
        assert_eq!(ParamStore::load(&path).unwrap().checksum().unwrap(), p.checksum().unwrap());
    }
}
