use crate::error::{Error, Result};

/// Greedy herding: at step `k` pick the unselected sample whose inclusion
/// brings the running mean of the selection closest (Euclidean) to the class
/// mean. Ties go to the lowest index.
pub fn herding_select(features: &[Vec<f32>], m: usize) -> Result<Vec<usize>> {
    let n = features.len();
    if n == 0 {
        return Err(Error::Empty("herding feature set"));
    }
    if m > n {
        return Err(Error::InvalidArgument(format!(
            "cannot select {m} exemplars from {n} samples"
        )));
    }
    let dim = features[0].len();
    if let Some(bad) = features.iter().position(|f| f.len() != dim) {
        return Err(Error::Shape(format!(
            "feature {bad} has dimension {} but feature 0 has {dim}",
            features[bad].len()
        )));
    }

    let mut mean = vec![0.0f64; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += *v as f64;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);

    let mut selected = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut running = vec![0.0f64; dim];
    for k in 1..=m {
        let mut best: Option<(usize, f64)> = None;
        for (i, f) in features.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let dist: f64 = mean
                .iter()
                .zip(&running)
                .zip(f)
                .map(|((mu, s), v)| {
                    let d = mu - (s + *v as f64) / k as f64;
                    d * d
                })
                .sum();
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((i, dist));
            }
        }
        let (i, _) = best.expect("m <= n leaves a candidate");
        taken[i] = true;
        for (s, v) in running.iter_mut().zip(&features[i]) {
            *s += *v as f64;
        }
        selected.push(i);
    }
    Ok(selected)
}
