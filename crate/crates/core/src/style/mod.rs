//! Arbitrary style transfer with adaptive instance normalization, style
//! distortions and shape-texture conflict batch generation.
//!
//! The encoder is a compact convolutional stack that stays frozen; the decoder
//! is trained once on base-task images and then kept fixed.

mod conflict;
mod distort;

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use conflict::{generate_conflict_batch, ConflictBatch};
pub use distort::{color_jitter, distort_style, DistortionConfig, JitterStrengths};

use crate::error::{Error, Result};
use crate::image::{images_to_tensor, tensor_to_images, Image};
use crate::nn::{conv, conv_weight, zeros, Adam, ParamStore};

/// Variance floor for content channels.
pub const ADAIN_EPS: f64 = 1e-5;
const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleModelConfig {
    /// Channels of the first encoder layer; doubled at each downsampling stage.
    pub width: usize,
    pub stages: usize,
    /// Content-style interpolation; 1 is full transfer.
    pub alpha: f32,
}

impl Default for StyleModelConfig {
    fn default() -> Self {
        Self {
            width: 16,
            stages: 1,
            alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub style_weight: f64,
    /// Weight of the plain auto-encoding term `|dec(enc(c)) - c|^2`.
    pub pixel_weight: f64,
}

impl Default for DecoderTraining {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            learning_rate: 2e-3,
            style_weight: 2.0,
            pixel_weight: 1.0,
        }
    }
}

/// Per-channel AdaIN: standardize `content` with its own statistics and
/// rescale to the per-channel mean and standard deviation of `style`.
///
/// Both tensors are `(N, C, H, W)`; spatial sizes may differ and a style batch
/// of one broadcasts over the content batch.
pub fn adain(content: &Tensor, style: &Tensor) -> Result<Tensor> {
    let (_, cc, _, _) = content.dims4()?;
    let (_, sc, _, _) = style.dims4()?;
    if cc != sc {
        return Err(Error::Shape(format!(
            "content has {cc} channels but style has {sc}"
        )));
    }
    let (cm, cv) = channel_stats(content)?;
    let (sm, sv) = channel_stats(style)?;
    let cstd = cv.maximum(ADAIN_EPS)?.sqrt()?;
    let sstd = sv.sqrt()?;
    let normalized = content.broadcast_sub(&cm)?.broadcast_div(&cstd)?;
    Ok(normalized.broadcast_mul(&sstd)?.broadcast_add(&sm)?)
}

/// Per-sample, per-channel spatial mean and population variance, each `(N, C, 1, 1)`.
pub fn channel_stats(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mean = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let var = x
        .broadcast_sub(&mean)?
        .sqr()?
        .mean_keepdim(D::Minus1)?
        .mean_keepdim(D::Minus2)?;
    Ok((mean, var))
}

fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StyleMeta {
    encoder_id: String,
    config: StyleModelConfig,
    trained: bool,
    reconstruction_bound: Option<f32>,
}

/// Frozen encoder plus learned decoder.
#[derive(Debug, Clone)]
pub struct StyleTransferModel {
    config: StyleModelConfig,
    encoder_id: String,
    encoder: ParamStore,
    decoder: ParamStore,
    trained: bool,
    reconstruction_bound: Option<f32>,
}

/// Outcome of decoder training.
#[derive(Debug, Clone)]
pub struct DecoderReport {
    pub loss_curve: Vec<f32>,
    pub reconstruction_bound: f32,
}

impl StyleTransferModel {
    /// Randomly initialized frozen encoder and untrained decoder.
    pub fn new<R: Rng + ?Sized>(config: StyleModelConfig, encoder_seed: u64, rng: &mut R) -> Result<Self> {
        if config.stages > 4 || config.width == 0 {
            return Err(Error::Config("style encoder needs 0..=4 stages and a positive width".into()));
        }
        if !(0.0..=1.0).contains(&config.alpha) {
            return Err(Error::Config("style.alpha must lie in [0, 1]".into()));
        }
        let mut enc_rng = crate::rng::substream(encoder_seed, "style/encoder", 0);
        let w = config.width;
        let mut encoder = ParamStore::new();
        encoder.insert("enc.c0.w", conv_weight(w, 3, 3, 1.0, &mut enc_rng)?)?;
        encoder.insert("enc.c0.b", zeros(w)?)?;
        for i in 1..=config.stages {
            let (cin, cout) = (w << (i - 1), w << i);
            encoder.insert(format!("enc.d{i}.w"), conv_weight(cout, cin, 3, 1.0, &mut enc_rng)?)?;
            encoder.insert(format!("enc.d{i}.b"), zeros(cout)?)?;
        }
        let mut decoder = ParamStore::new();
        for i in 1..=config.stages {
            let (cin, cout) = (w << i, w << (i - 1));
            decoder.insert(format!("dec.u{i}.w"), conv_weight(cout, cin, 3, 1.0, rng)?)?;
            decoder.insert(format!("dec.u{i}.b"), zeros(cout)?)?;
        }
        decoder.insert("dec.r.w", conv_weight(w, w, 3, 1.0, rng)?)?;
        decoder.insert("dec.r.b", zeros(w)?)?;
        decoder.insert("dec.out.w", conv_weight(3, w, 3, 0.5, rng)?)?;
        decoder.insert("dec.out.b", zeros(3)?)?;
        Ok(Self {
            encoder_id: format!("random-conv-w{}-s{}-seed{encoder_seed}", config.width, config.stages),
            config,
            encoder,
            decoder,
            trained: false,
            reconstruction_bound: None,
        })
    }

    pub fn config(&self) -> &StyleModelConfig {
        &self.config
    }

    pub fn encoder_id(&self) -> &str {
        &self.encoder_id
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn reconstruction_bound(&self) -> Option<f32> {
        self.reconstruction_bound
    }

    pub fn encoder_checksum(&self) -> Result<u64> {
        self.encoder.checksum()
    }

    pub fn decoder_checksum(&self) -> Result<u64> {
        self.decoder.checksum()
    }

    /// Activations after every encoder layer; the last one is the AdaIN space.
    pub fn encode_all(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let e = &self.encoder;
        let mut h = conv(x, &e.tensor("enc.c0.w").detach(), &e.tensor("enc.c0.b").detach(), 1)?.relu()?;
        let mut acts = vec![h.clone()];
        for i in 1..=self.config.stages {
            h = conv(
                &h,
                &e.tensor(&format!("enc.d{i}.w")).detach(),
                &e.tensor(&format!("enc.d{i}.b")).detach(),
                2,
            )?
            .relu()?;
            acts.push(h.clone());
        }
        Ok(acts)
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encode_all(x)?.pop().expect("encoder has layers"))
    }

    pub fn decode(&self, t: &Tensor) -> Result<Tensor> {
        let d = &self.decoder;
        let mut h = t.clone();
        for i in (1..=self.config.stages).rev() {
            h = conv(&h, d.tensor(&format!("dec.u{i}.w")), d.tensor(&format!("dec.u{i}.b")), 1)?.relu()?;
            let (_, _, hh, ww) = h.dims4()?;
            h = h.upsample_nearest2d(hh * 2, ww * 2)?;
        }
        h = conv(&h, d.tensor("dec.r.w"), d.tensor("dec.r.b"), 1)?.relu()?;
        sigmoid(&conv(&h, d.tensor("dec.out.w"), d.tensor("dec.out.b"), 1)?)
    }

    fn transfer(&self, content: &Tensor, style: &Tensor) -> Result<Tensor> {
        let fc = self.encode(content)?;
        let fs = self.encode(style)?;
        let mut t = adain(&fc, &fs)?;
        if self.config.alpha < 1.0 {
            let a = self.config.alpha as f64;
            t = ((t * a)? + (fc * (1.0 - a))?)?;
        }
        self.decode(&t)
    }

    /// `decoder(adain(encoder(content), encoder(style)))` clamped to `[0, 1]`.
    pub fn stylize(&self, content: &Image, style: &Image) -> Result<Image> {
        Ok(self.stylize_batch(&[content], &[style])?.pop().expect("one image"))
    }

    /// Element-wise stylization of paired batches.
    pub fn stylize_batch(&self, contents: &[&Image], styles: &[&Image]) -> Result<Vec<Image>> {
        if !self.trained {
            return Err(Error::UntrainedDecoder);
        }
        if contents.len() != styles.len() {
            return Err(Error::Shape(format!(
                "{} content images but {} style images",
                contents.len(),
                styles.len()
            )));
        }
        let mut out = Vec::with_capacity(contents.len());
        for (c, s) in contents.chunks(CHUNK).zip(styles.chunks(CHUNK)) {
            let ct = images_to_tensor(c.iter().copied(), &Device::Cpu)?;
            let st = images_to_tensor(s.iter().copied(), &Device::Cpu)?;
            let y = self.transfer(&ct, &st)?.detach().clamp(0f32, 1f32)?;
            out.extend(tensor_to_images(&y)?);
        }
        Ok(out)
    }

    /// Per-channel mean and std of encoder features, concatenated, per image.
    pub fn feature_stats(&self, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
        let x = images_to_tensor(images.iter().copied(), &Device::Cpu)?;
        let (m, v) = channel_stats(&self.encode(&x)?)?;
        let stats = Tensor::cat(&[m.flatten_from(1)?, v.sqrt()?.flatten_from(1)?], 1)?;
        Ok(stats.to_dtype(DType::F32)?.to_vec2()?)
    }

    /// Train the decoder on content+style objectives over random pairs of
    /// `images`, holding out a tenth for the reconstruction bound.
    pub fn train_decoder<R: Rng + ?Sized>(
        &mut self,
        images: &[&Image],
        training: &DecoderTraining,
        rng: &mut R,
    ) -> Result<DecoderReport> {
        if images.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "decoder training needs at least 2 images, got {}",
                images.len()
            )));
        }
        let mut idx: Vec<usize> = (0..images.len()).collect();
        idx.shuffle(rng);
        let n_val = (images.len() / 10).clamp(1, 64);
        let (val, train) = idx.split_at(n_val);
        let mut opt = Adam::new(training.learning_rate);
        let mut curve = Vec::with_capacity(training.steps);
        let bsz = training.batch_size.max(1);
        for _ in 0..training.steps {
            let ci: Vec<&Image> = (0..bsz).map(|_| images[train[rng.random_range(0..train.len())]]).collect();
            let si: Vec<&Image> = (0..bsz).map(|_| images[train[rng.random_range(0..train.len())]]).collect();
            let c = images_to_tensor(ci, &Device::Cpu)?;
            let s = images_to_tensor(si, &Device::Cpu)?;
            let fc = self.encode(&c)?;
            let s_acts = self.encode_all(&s)?;
            let t = adain(&fc, s_acts.last().expect("layers"))?;
            let out = self.decode(&t)?;
            let out_acts = self.encode_all(&out)?;
            let content_loss = (out_acts.last().expect("layers") - &t)?.sqr()?.mean_all()?;
            let mut style_loss = Tensor::new(0f32, &Device::Cpu)?;
            for (a, b) in out_acts.iter().zip(&s_acts) {
                let (ma, va) = channel_stats(a)?;
                let (mb, vb) = channel_stats(b)?;
                let dm = (ma - mb)?.sqr()?.mean_all()?;
                let ds = ((va + ADAIN_EPS)?.sqrt()? - (vb + ADAIN_EPS)?.sqrt()?)?.sqr()?.mean_all()?;
                style_loss = (style_loss + dm + ds)?;
            }
            let pixel = (self.decode(&fc)? - &c)?.sqr()?.mean_all()?;
            let loss = ((content_loss + (style_loss * training.style_weight)?)? + (pixel * training.pixel_weight)?)?;
            let value: f32 = loss.to_scalar()?;
            if !value.is_finite() {
                return Err(Error::NonFinite("decoder training loss"));
            }
            curve.push(value);
            let grads = loss.backward()?;
            opt.step(&self.decoder, &grads)?;
        }
        self.trained = true;
        let val_imgs: Vec<&Image> = val.iter().map(|&i| images[i]).collect();
        let recon = self.stylize_batch(&val_imgs, &val_imgs)?;
        let bound = recon
            .iter()
            .zip(&val_imgs)
            .map(|(r, c)| r.mse(c))
            .fold(0.0f32, f32::max);
        self.reconstruction_bound = Some(bound);
        Ok(DecoderReport {
            loss_curve: curve,
            reconstruction_bound: bound,
        })
    }

    /// Writes `<path>` (safetensors weights) and `<path>.json` (metadata).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut all = self.encoder.to_tensors();
        all.extend(self.decoder.to_tensors());
        candle_core::safetensors::save(&all, path)?;
        let meta = StyleMeta {
            encoder_id: self.encoder_id.clone(),
            config: self.config.clone(),
            trained: self.trained,
            reconstruction_bound: self.reconstruction_bound,
        };
        let json = serde_json::to_string_pretty(&meta)?;
        let meta_path = meta_path(path);
        std::fs::write(&meta_path, json).map_err(|e| Error::io(meta_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta_path = meta_path(path);
        let json = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: StyleMeta = serde_json::from_str(&json)?;
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
        let mut encoder = ParamStore::new();
        let mut decoder = ParamStore::new();
        for (name, t) in tensors {
            if name.starts_with("enc.") {
                encoder.insert(name, t)?;
            } else {
                decoder.insert(name, t)?;
            }
        }
        Ok(Self {
            config: meta.config,
            encoder_id: meta.encoder_id,
            encoder,
            decoder,
            trained: meta.trained,
            reconstruction_bound: meta.reconstruction_bound,
        })
    }
}

fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}
