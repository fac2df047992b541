//! Training objectives: cross-entropy, logit distillation, the online
//! shape-texture debiased self-distillation term, the adaptive distillation
//! weight and the composed per-iteration totals.
//!
//! Every batch loss is mean-reduced over rows.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_base: f64,
    pub gamma: f64,
    pub tau_std: f64,
    pub tau_kd: f64,
    /// Treat the ensembled target of the self-distillation term as a constant.
    pub detach_std_target: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_base: 20.0,
            gamma: 0.01,
            tau_std: 2.0,
            tau_kd: 2.0,
            detach_std_target: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.lambda_base) || !ok(self.tau_std) || !ok(self.tau_kd) {
            return Err(Error::Config(
                "loss.lambda_base, loss.tau_std and loss.tau_kd must be positive".into(),
            ));
        }
        // gamma = 0 is accepted to disable the self-distillation term in ablations
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Config("loss.gamma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Row-wise log-softmax over the last dimension.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Mean over rows of `KL(p || q)` given log-probabilities.
fn kl_rows(log_p: &Tensor, log_q: &Tensor) -> Result<Tensor> {
    let rows = log_p.dim(0)? as f64;
    let kl = (log_p.exp()? * (log_p - log_q)?)?.sum_all()?;
    Ok((kl / rows)?)
}

fn ensure_finite(x: &Tensor, what: &'static str) -> Result<()> {
    let total: f64 = x.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar()?;
    if total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn ensure_2d(x: &Tensor, what: &str) -> Result<(usize, usize)> {
    x.dims2()
        .map_err(|_| Error::Shape(format!("{what} must be a (rows, classes) matrix, got {:?}", x.dims())))
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (rows, classes) = ensure_2d(logits, "logits")?;
    if rows != labels.len() {
        return Err(Error::Shape(format!("{rows} logit rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Shape(format!("label {bad} outside {classes} classes")));
    }
    let mut onehot = vec![0.0f32; rows * classes];
    for (r, &l) in labels.iter().enumerate() {
        onehot[r * classes + l] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (rows, classes), logits.device())?.to_dtype(logits.dtype())?;
    let nll = (log_softmax(logits)? * onehot)?.sum_all()?.neg()?;
    Ok((nll / rows as f64)?)
}

/// Online shape-texture debiased self-distillation:
/// `KL(p || q) + KL(p~ || q)` with `p = softmax(Z / tau)`, `p~ = softmax(Z~ / tau)`
/// and `q = softmax((Z + Z~) / (2 tau))`.
pub fn std_loss(z: &Tensor, z_tilde: &Tensor, tau: f64, detach_target: bool) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let a = ensure_2d(z, "natural logits")?;
    let b = ensure_2d(z_tilde, "conflict logits")?;
    if a != b {
        return Err(Error::Shape(format!("logit pair shapes differ: {a:?} vs {b:?}")));
    }
    ensure_finite(z, "natural logits")?;
    ensure_finite(z_tilde, "conflict logits")?;
    let log_p = log_softmax(&(z / tau)?)?;
    let log_pt = log_softmax(&(z_tilde / tau)?)?;
    let mut log_q = log_softmax(&((z + z_tilde)? / (2.0 * tau))?)?;
    if detach_target {
        log_q = log_q.detach();
    }
    Ok((kl_rows(&log_p, &log_q)? + kl_rows(&log_pt, &log_q)?)?)
}

/// Temperature-softened KL from the old model's distribution over the old
/// classes to the new model's distribution restricted to those columns,
/// scaled by `tau^2`.
pub fn kd_loss(new_logits: &Tensor, old_logits: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let (rn, cn) = ensure_2d(new_logits, "new logits")?;
    let (ro, co) = ensure_2d(old_logits, "old logits")?;
    if rn != ro || co > cn || co == 0 {
        return Err(Error::Shape(format!(
            "old logits {ro}x{co} do not cover the old columns of new logits {rn}x{cn}"
        )));
    }
    let restricted = new_logits.narrow(1, 0, co)?;
    let log_old = log_softmax(&(old_logits.detach() / tau)?)?;
    let log_new = log_softmax(&(restricted / tau)?)?;
    Ok((kl_rows(&log_old, &log_new)? * (tau * tau))?)
}

/// `lambda_base * (seen_classes / m_t)^(2/3)`.
pub fn adaptive_lambda(seen_classes: usize, m_t: usize, lambda_base: f64) -> f64 {
    debug_assert!(m_t >= 1 && seen_classes >= m_t);
    lambda_base * (seen_classes as f64 / m_t as f64).powf(2.0 / 3.0)
}

/// Scalar-like values the totals can be composed over: plain numbers for
/// bookkeeping and tensors for training.
pub trait LossValue: Sized {
    fn plus(&self, other: &Self) -> Result<Self>;
    fn times(&self, k: f64) -> Result<Self>;
}

impl LossValue for f64 {
    fn plus(&self, other: &Self) -> Result<Self> {
        Ok(self + other)
    }

    fn times(&self, k: f64) -> Result<Self> {
        Ok(self * k)
    }
}

impl LossValue for Tensor {
    fn plus(&self, other: &Self) -> Result<Self> {
        Ok((self + other)?)
    }

    fn times(&self, k: f64) -> Result<Self> {
        Ok((self * k)?)
    }
}

/// Replay terms of one iteration, both computed on natural exemplars.
#[derive(Debug, Clone)]
pub struct ReplayTerms<T> {
    pub ce: T,
    pub kd: Option<T>,
}

/// Component losses of one iteration.
#[derive(Debug, Clone)]
pub struct BatchTerms<T> {
    /// CE over the current-task rows (natural, plus conflict in debiased modes).
    pub ce_current: T,
    /// KD over the same rows; absent without an old model.
    pub kd_current: Option<T>,
    pub replay: Option<ReplayTerms<T>>,
    pub std: Option<T>,
    /// Natural and conflict row counts of the current-task batch.
    pub natural_rows: usize,
    pub conflict_rows: usize,
}

fn sum_opt<T: LossValue>(a: Option<&T>, b: Option<&T>) -> Result<Option<T>> {
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(a.plus(b)?),
        (Some(a), None) => Some(a.times(1.0)?),
        (None, Some(b)) => Some(b.times(1.0)?),
        (None, None) => None,
    })
}

/// `CE(D) + CE(P) + lambda * (KD(D) + KD(P))`. Replay terms may only be absent
/// when `exemplar_free` is set, in which case they count as zero.
pub fn total_loss_standard<T: LossValue>(terms: &BatchTerms<T>, lambda: f64, exemplar_free: bool) -> Result<T> {
    if terms.replay.is_none() && !exemplar_free {
        return Err(Error::InvalidArgument(
            "replay terms missing outside exemplar-free mode".into(),
        ));
    }
    let mut total = terms.ce_current.times(1.0)?;
    if let Some(r) = &terms.replay {
        total = total.plus(&r.ce)?;
    }
    let kd = sum_opt(terms.kd_current.as_ref(), terms.replay.as_ref().and_then(|r| r.kd.as_ref()))?;
    if let Some(kd) = kd {
        total = total.plus(&kd.times(lambda)?)?;
    }
    Ok(total)
}

/// Standard total plus `gamma * STD`.
pub fn total_loss_debiased<T: LossValue>(
    terms: &BatchTerms<T>,
    lambda: f64,
    gamma: f64,
    exemplar_free: bool,
) -> Result<T> {
    let base = total_loss_standard(terms, lambda, exemplar_free)?;
    match &terms.std {
        Some(std) => {
            if terms.conflict_rows == 0 || terms.conflict_rows != terms.natural_rows {
                return Err(Error::InvalidArgument(format!(
                    "self-distillation term needs a conflict batch matching the {} natural rows, got {}",
                    terms.natural_rows, terms.conflict_rows
                )));
            }
            base.plus(&std.times(gamma)?)
        }
        None => Ok(base),
    }
}
