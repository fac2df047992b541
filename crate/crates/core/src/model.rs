//! Compact residual backbone with a cosine-normalized, append-only classifier.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureExtractor;
use crate::error::{Error, Result};
use crate::image::{images_to_tensor, Image};
use crate::nn::{conv, conv_weight, group_norm, norm_groups, normal_tensor, ones, zeros, ParamStore};

const HEAD_WEIGHT: &str = "head.weight";
const HEAD_SCALE: &str = "head.scale";
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Channel widths of the three stages; stages 2 and 3 halve the resolution.
    pub widths: [usize; 3],
    /// Initial value of the learnable cosine scale.
    pub init_scale: f32,
    /// Std of the Gaussian used for new class weight vectors.
    pub head_init_std: f32,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: [8, 16, 32],
            init_scale: 10.0,
            head_init_std: 0.2,
        }
    }
}

impl BackboneConfig {
    pub fn embedding_dim(&self) -> usize {
        self.widths[2]
    }
}

/// Feature extractor plus cosine classifier `logit_c = eta * cos(f, w_c)`.
#[derive(Debug, Clone)]
pub struct IncrementalModel {
    config: BackboneConfig,
    params: ParamStore,
    num_classes: usize,
    frozen: bool,
}

impl IncrementalModel {
    /// Backbone with an empty head; call [`extend_classifier`](Self::extend_classifier) before use.
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        let [c1, c2, c3] = config.widths;
        let mut p = ParamStore::new();
        // conv followed by GroupNorm; `gain` is the initial norm scale
        let mut layer = |p: &mut ParamStore, name: String, cout: usize, cin: usize, gain: f32| -> Result<()> {
            p.insert(format!("{name}.w"), conv_weight(cout, cin, 3, 1.0, rng)?)?;
            p.insert(format!("{name}.b"), zeros(cout)?)?;
            p.insert(format!("{name}.g"), (ones(cout)? * gain as f64)?)?;
            p.insert(format!("{name}.beta"), zeros(cout)?)?;
            Ok(())
        };
        layer(&mut p, "stem".into(), c1, config.in_channels, 1.0)?;
        for (stage, (cin, c)) in [(c1, c1), (c1, c2), (c2, c3)].into_iter().enumerate() {
            let s = stage + 1;
            if stage > 0 {
                layer(&mut p, format!("s{s}.down"), c, cin, 1.0)?;
            }
            layer(&mut p, format!("s{s}.a"), c, c, 1.0)?;
            // residual branch starts small
            layer(&mut p, format!("s{s}.b"), c, c, 0.1)?;
        }
        p.insert(HEAD_SCALE, Tensor::new(&[config.init_scale], &Device::Cpu)?)?;
        Ok(Self {
            config,
            params: p,
            num_classes: 0,
            frozen: false,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn scale(&self) -> Result<f32> {
        Ok(self.params.tensor(HEAD_SCALE).to_vec1::<f32>()?[0])
    }

    /// Append `m_t` class weight vectors. Existing vectors and the scale are not touched.
    pub fn extend_classifier<R: Rng + ?Sized>(&mut self, m_t: usize, rng: &mut R) -> Result<()> {
        if m_t == 0 {
            return Err(Error::InvalidArgument("classifier extension needs m_t >= 1".into()));
        }
        if self.frozen {
            return Err(Error::InvalidArgument("cannot extend a frozen snapshot".into()));
        }
        let d = self.config.embedding_dim();
        let fresh = normal_tensor(&[m_t, d], self.config.head_init_std, rng)?;
        let weight = match self.params.get(HEAD_WEIGHT) {
            Some(old) => Tensor::cat(&[old.as_tensor(), &fresh], 0)?,
            None => fresh,
        };
        self.params.insert(HEAD_WEIGHT, weight)?;
        self.num_classes += m_t;
        Ok(())
    }

    /// Frozen deep copy. Its outputs never carry gradient.
    pub fn snapshot(&self) -> Result<Self> {
        Ok(Self {
            config: self.config.clone(),
            params: self.params.deep_copy()?,
            num_classes: self.num_classes,
            frozen: true,
        })
    }

    fn layer(&self, x: &Tensor, name: &str, stride: usize) -> Result<Tensor> {
        let p = &self.params;
        let y = conv(x, p.tensor(&format!("{name}.w")), p.tensor(&format!("{name}.b")), stride)?;
        group_norm(&y, norm_groups(y.dim(1)?), p.tensor(&format!("{name}.g")), p.tensor(&format!("{name}.beta")))
    }

    fn block(&self, h: &Tensor, stage: usize, final_relu: bool) -> Result<Tensor> {
        let a = self.layer(h, &format!("s{stage}.a"), 1)?.relu()?;
        let b = self.layer(&a, &format!("s{stage}.b"), 1)?;
        let out = (h + b)?;
        Ok(if final_relu { out.relu()? } else { out })
    }

    /// Penultimate embedding, shape `(N, d)`.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.layer(x, "stem", 1)?.relu()?;
        h = self.block(&h, 1, true)?;
        for s in [2, 3] {
            h = self.layer(&h, &format!("s{s}.down"), 2)?.relu()?;
            h = self.block(&h, s, s != 3)?;
        }
        let f = h.mean(D::Minus1)?.mean(D::Minus1)?;
        Ok(if self.frozen { f.detach() } else { f })
    }

    /// Cosine logits for an embedding batch.
    pub fn head(&self, features: &Tensor) -> Result<Tensor> {
        let w = self
            .params
            .get(HEAD_WEIGHT)
            .ok_or_else(|| Error::InvalidArgument("classifier has no classes yet".into()))?
            .as_tensor();
        let f = l2_rows(features)?;
        let w = l2_rows(w)?;
        let cos = f.matmul(&w.t()?)?;
        let out = cos.broadcast_mul(self.params.tensor(HEAD_SCALE))?;
        Ok(if self.frozen { out.detach() } else { out })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.head(&self.embed(x)?)
    }

    /// Logits for images, evaluated in chunks without building a graph.
    pub fn logits_for(&self, images: &[&Image]) -> Result<Tensor> {
        let mut parts = Vec::new();
        for chunk in images.chunks(EVAL_CHUNK) {
            let x = images_to_tensor(chunk.iter().copied(), &Device::Cpu)?;
            parts.push(self.forward(&x)?.detach());
        }
        if parts.is_empty() {
            return Err(Error::Empty("image list"));
        }
        Ok(Tensor::cat(&parts, 0)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(path: &Path, config: BackboneConfig) -> Result<Self> {
        let params = ParamStore::load(path)?;
        let num_classes = params.get(HEAD_WEIGHT).map(|w| w.dims()[0]).unwrap_or(0);
        if params.get(HEAD_WEIGHT).is_some_and(|w| w.dims()[1] != config.embedding_dim()) {
            return Err(Error::Shape("checkpoint head does not match backbone width".into()));
        }
        Ok(Self {
            config,
            params,
            num_classes,
            frozen: false,
        })
    }
}

fn l2_rows(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

impl FeatureExtractor for IncrementalModel {
    fn features(&self, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_CHUNK) {
            let x = images_to_tensor(chunk.iter().copied(), &Device::Cpu)?;
            let f = self.embed(&x)?.detach().to_dtype(DType::F32)?;
            out.extend(f.to_vec2::<f32>()?);
        }
        Ok(out)
    }
}
