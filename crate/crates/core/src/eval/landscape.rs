//! Loss profiles along filter-normalized random directions in weight space.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{normal_tensor, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeProfile {
    pub alphas: Vec<f64>,
    /// Per-alpha loss averaged over directions.
    pub mean_loss: Vec<f64>,
    pub num_directions: usize,
    /// `losses[d][a]`: loss along direction `d` at `alphas[a]`. Non-finite
    /// values are kept as they came.
    pub losses: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeOptions {
    pub num_directions: usize,
    /// Draw directions in `(d, -d)` pairs; needs an even direction count.
    pub antithetic: bool,
}

impl Default for LandscapeOptions {
    fn default() -> Self {
        Self {
            num_directions: 5,
            antithetic: false,
        }
    }
}

/// Random Gaussian direction with every output filter (row along dim 0)
/// rescaled to the norm of the matching parameter row. Biases and other
/// rank <= 1 tensors get a zero direction.
pub fn filter_normalized_direction<R: Rng + ?Sized>(params: &ParamStore, rng: &mut R) -> Result<Vec<Tensor>> {
    params
        .iter()
        .map(|(_, var)| {
            let theta = var.as_tensor();
            if theta.rank() <= 1 {
                return Ok(theta.zeros_like()?);
            }
            let d = normal_tensor(theta.dims(), 1.0, rng)?.to_dtype(theta.dtype())?;
            let rows = theta.dims()[0];
            let flat_t = theta.flatten_from(1)?;
            let flat_d = d.flatten_from(1)?;
            let nt = flat_t.sqr()?.sum_keepdim(1)?.sqrt()?;
            let nd = (flat_d.sqr()?.sum_keepdim(1)?.sqrt()? + 1e-10)?;
            let scaled = flat_d.broadcast_mul(&nt.broadcast_div(&nd)?)?;
            debug_assert_eq!(scaled.dims()[0], rows);
            Ok(scaled.reshape(theta.dims())?)
        })
        .collect()
}

/// Evaluate `loss_eval` at `theta + alpha * d` for every alpha and direction,
/// then put every parameter back to its saved value.
pub fn loss_landscape<F, R>(
    params: &ParamStore,
    mut loss_eval: F,
    alphas: &[f64],
    options: &LandscapeOptions,
    rng: &mut R,
) -> Result<LandscapeProfile>
where
    F: FnMut() -> Result<f64>,
    R: Rng + ?Sized,
{
    if !alphas.contains(&0.0) {
        return Err(Error::InvalidArgument("landscape alphas must include 0".into()));
    }
    let n = options.num_directions;
    if n == 0 || (options.antithetic && n % 2 != 0) {
        return Err(Error::InvalidArgument(format!(
            "invalid direction count {n} (antithetic sampling needs an even count)"
        )));
    }
    let vars = params.vars();
    let saved: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().copy()).collect::<candle_core::Result<_>>()?;

    let mut directions: Vec<Vec<Tensor>> = Vec::with_capacity(n);
    while directions.len() < n {
        let d = filter_normalized_direction(params, rng)?;
        if options.antithetic {
            let neg = d.iter().map(|t| t.neg()).collect::<candle_core::Result<Vec<_>>>()?;
            directions.push(d);
            directions.push(neg);
        } else {
            directions.push(d);
        }
    }

    let run = |losses: &mut Vec<Vec<f64>>, loss_eval: &mut F| -> Result<()> {
        for dir in &directions {
            let mut row = Vec::with_capacity(alphas.len());
            for &a in alphas {
                for ((var, theta), d) in vars.iter().zip(&saved).zip(dir) {
                    var.set(&(theta + (d * a)?)?)?;
                }
                row.push(loss_eval()?);
            }
            losses.push(row);
        }
        Ok(())
    };
    let mut losses = Vec::with_capacity(n);
    let outcome = run(&mut losses, &mut loss_eval);
    for (var, theta) in vars.iter().zip(&saved) {
        var.set(theta)?;
    }
    outcome?;

    let mean_loss = (0..alphas.len())
        .map(|a| {
            if options.antithetic {
                // pair sums first so the profile is exactly even in alpha
                losses.chunks(2).map(|p| p[0][a] + p[1][a]).sum::<f64>() / n as f64
            } else {
                losses.iter().map(|l| l[a]).sum::<f64>() / n as f64
            }
        })
        .collect();
    Ok(LandscapeProfile {
        alphas: alphas.to_vec(),
        mean_loss,
        num_directions: n,
        losses,
    })
}
