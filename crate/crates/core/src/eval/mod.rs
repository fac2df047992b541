//! Accuracy, forgetting, corruption robustness, the domain-shift proxy and
//! loss-landscape profiling.

mod corrupt;
mod landscape;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use corrupt::{corrupt_dataset, corrupt_image, CorruptionKind, CorruptionSpec};
pub use landscape::{filter_normalized_direction, loss_landscape, LandscapeOptions, LandscapeProfile};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::IncrementalModel;
use crate::rng::substream;
use crate::style::StyleTransferModel;

/// Anything that assigns an output column to each image.
pub trait Predictor {
    fn predict(&self, images: &[&Image]) -> Result<Vec<usize>>;
}

impl Predictor for IncrementalModel {
    fn predict(&self, images: &[&Image]) -> Result<Vec<usize>> {
        let logits = self.logits_for(images)?;
        Ok(logits.argmax(1)?.to_vec1::<u32>()?.into_iter().map(|v| v as usize).collect())
    }
}

/// Top-1 accuracy in percent.
pub fn evaluate_step_accuracy<P: Predictor + ?Sized>(model: &P, images: &[&Image], labels: &[usize]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if images.len() != labels.len() {
        return Err(Error::Shape("images and labels differ in length".into()));
    }
    let pred = model.predict(images)?;
    Ok(100.0 * pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

/// Accuracy of the base model on the base task minus that of the final model.
pub fn forgetting_rate(acc_t0_at_step0: f64, acc_t0_at_step_t: f64) -> f64 {
    acc_t0_at_step0 - acc_t0_at_step_t
}

pub fn average_incremental_accuracy(per_step: &[f64]) -> f64 {
    if per_step.is_empty() {
        return f64::NAN;
    }
    per_step.iter().sum::<f64>() / per_step.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionCell {
    pub kind: CorruptionKind,
    pub severity: u8,
    /// Top-1 error in percent.
    pub error: f64,
}

/// Unnormalized mean over cells.
pub fn mce_from_cells(cells: &[CorruptionCell]) -> f64 {
    cells.iter().map(|c| c.error).sum::<f64>() / cells.len() as f64
}

/// Error on every `(kind, severity)` cell. Each cell's noise comes from its own
/// substream of `seed`, so cells do not depend on evaluation order.
pub fn corruption_cells<P: Predictor + ?Sized>(
    model: &P,
    images: &[&Image],
    labels: &[usize],
    kinds: &[CorruptionKind],
    severities: &[u8],
    seed: u64,
) -> Result<Vec<CorruptionCell>> {
    if kinds.is_empty() || severities.is_empty() {
        return Err(Error::InvalidArgument("need at least one corruption kind and severity".into()));
    }
    let mut cells = Vec::with_capacity(kinds.len() * severities.len());
    for &kind in kinds {
        for &severity in severities {
            let spec = CorruptionSpec::new(kind, severity)?;
            let mut rng = substream(seed, kind.as_str(), severity as u64);
            let corrupted = corrupt_dataset(images, &spec, &mut rng);
            let refs: Vec<&Image> = corrupted.iter().collect();
            let acc = evaluate_step_accuracy(model, &refs, labels)?;
            cells.push(CorruptionCell {
                kind,
                severity,
                error: 100.0 - acc,
            });
        }
    }
    Ok(cells)
}

pub fn mean_corruption_error<P: Predictor + ?Sized>(
    model: &P,
    images: &[&Image],
    labels: &[usize],
    kinds: &[CorruptionKind],
    severities: &[u8],
    seed: u64,
) -> Result<f64> {
    Ok(mce_from_cells(&corruption_cells(model, images, labels, kinds, severities, seed)?))
}

/// Accuracy on a shifted test set; same metric path as clean accuracy.
pub fn domain_shift_accuracy<P: Predictor + ?Sized>(model: &P, images: &[&Image], labels: &[usize]) -> Result<f64> {
    evaluate_step_accuracy(model, images, labels)
}

/// Domain-shift proxy: every test image restyled with a randomly chosen
/// held-out style image that no training or exemplar image shares.
pub fn stylized_proxy<R: Rng + ?Sized>(
    images: &[&Image],
    holdout_styles: &[Image],
    style: &StyleTransferModel,
    rng: &mut R,
) -> Result<Vec<Image>> {
    if holdout_styles.is_empty() {
        return Err(Error::Empty("hold-out style set"));
    }
    let styles: Vec<&Image> = (0..images.len())
        .map(|_| &holdout_styles[rng.random_range(0..holdout_styles.len())])
        .collect();
    style.stylize_batch(images, &styles)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_step_accuracy: Vec<f64>,
    /// Accuracy on base-task test data after each step.
    pub base_task_accuracy: Vec<f64>,
    pub avg_inc_acc: f64,
    pub final_acc: f64,
    pub forgetting: f64,
    pub mce: f64,
    /// Stylized hold-out proxy, not a rendition benchmark.
    pub domain_shift_acc: Option<f64>,
}

impl MetricsReport {
    pub fn from_parts(
        per_step_accuracy: Vec<f64>,
        base_task_accuracy: Vec<f64>,
        cells: &[CorruptionCell],
        domain_shift_acc: Option<f64>,
    ) -> Result<Self> {
        let (Some(&final_acc), Some(&b0), Some(&bt)) = (
            per_step_accuracy.last(),
            base_task_accuracy.first(),
            base_task_accuracy.last(),
        ) else {
            return Err(Error::Empty("per-step accuracies"));
        };
        if cells.is_empty() {
            return Err(Error::Empty("corruption cells"));
        }
        Ok(Self {
            avg_inc_acc: average_incremental_accuracy(&per_step_accuracy),
            final_acc,
            forgetting: forgetting_rate(b0, bt),
            mce: mce_from_cells(cells),
            per_step_accuracy,
            base_task_accuracy,
            domain_shift_acc,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Reads the label off the first pixel.
    struct Oracle;
    impl Predictor for Oracle {
        fn predict(&self, images: &[&Image]) -> Result<Vec<usize>> {
            Ok(images.iter().map(|i| i.data()[0].round() as usize).collect())
        }
    }

    struct Constant(usize);
    impl Predictor for Constant {
        fn predict(&self, images: &[&Image]) -> Result<Vec<usize>> {
            Ok(vec![self.0; images.len()])
        }
    }

    fn labeled(c: usize, per: usize) -> (Vec<Image>, Vec<usize>) {
        let mut imgs = Vec::new();
        let mut labels = Vec::new();
        for l in 0..c {
            for _ in 0..per {
                imgs.push(Image::filled(1, 2, 2, l as f32));
                labels.push(l);
            }
        }
        (imgs, labels)
    }

    #[test]
    fn accuracy_oracles() {
        let (imgs, labels) = labeled(4, 5);
        let refs: Vec<&Image> = imgs.iter().collect();
        assert_eq!(evaluate_step_accuracy(&Oracle, &refs, &labels).unwrap(), 100.0);
        assert_eq!(evaluate_step_accuracy(&Constant(2), &refs, &labels).unwrap(), 25.0);
        assert!(evaluate_step_accuracy(&Oracle, &[], &[]).is_err());
        assert_eq!(domain_shift_accuracy(&Constant(1), &refs, &labels).unwrap(), 25.0);
    }

    #[test]
    fn forgetting_examples() {
        assert_eq!(forgetting_rate(80.0, 80.0), 0.0);
        assert_eq!(forgetting_rate(80.0, 70.0), 10.0);
    }

    #[test]
    fn mce_of_grid() {
        let cells: Vec<CorruptionCell> = [10.0, 20.0, 30.0, 40.0]
            .iter()
            .enumerate()
            .map(|(i, &e)| CorruptionCell {
                kind: CorruptionKind::ALL[i / 2],
                severity: (i % 2 + 1) as u8,
                error: e,
            })
            .collect();
        assert_eq!(mce_from_cells(&cells), 25.0);
    }

    #[test]
    fn constant_predictor_cells() {
        let (imgs, labels) = labeled(4, 3);
        let refs: Vec<&Image> = imgs.iter().collect();
        let cells = corruption_cells(&Constant(0), &refs, &labels, &CorruptionKind::ALL, &[1, 3, 5], 0).unwrap();
        assert!(cells.iter().all(|c| c.error == 75.0));
        assert_eq!(mce_from_cells(&cells), 75.0);
        assert!(mean_corruption_error(&Constant(0), &refs, &labels, &[], &[1], 0).is_err());
    }

    #[test]
    fn report_composition() {
        let cells = vec![CorruptionCell { kind: CorruptionKind::Contrast, severity: 1, error: 12.0 }];
        let r = MetricsReport::from_parts(vec![90.0, 70.0, 60.0], vec![90.0, 80.0, 75.0], &cells, None).unwrap();
        assert_eq!(r.avg_inc_acc, 220.0 / 3.0);
        assert_eq!(r.final_acc, 60.0);
        assert_eq!(r.forgetting, 15.0);
        assert_eq!(r.mce, 12.0);
    }

    proptest! {
        #[test]
        fn constant_sequence_average(v in 0.0f64..100.0, n in 1usize..20) {
            let avg = average_incremental_accuracy(&vec![v; n]);
            prop_assert!((avg - v).abs() <= 1e-12 * v.max(1.0));
        }

        #[test]
        fn mce_ignores_cell_order(errors in prop::collection::vec(0.0f64..100.0, 1..30), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let cells: Vec<CorruptionCell> = errors.iter().enumerate().map(|(i, &e)| CorruptionCell {
                kind: CorruptionKind::ALL[i % 6], severity: (i % 5 + 1) as u8, error: e,
            }).collect();
            let mut shuffled = cells.clone();
            shuffled.shuffle(&mut substream(seed, "perm", 0));
            prop_assert!((mce_from_cells(&cells) - mce_from_cells(&shuffled)).abs() < 1e-9);
        }
    }

    #[test]
    fn cells_do_not_depend_on_order() {
        let (imgs, labels) = labeled(3, 4);
        let refs: Vec<&Image> = imgs.iter().collect();
        let kinds = [CorruptionKind::GaussianNoise, CorruptionKind::ShotNoise];
        let a = corruption_cells(&Oracle, &refs, &labels, &kinds, &[1, 5], 3).unwrap();
        let b = corruption_cells(&Oracle, &refs, &labels, &[kinds[1], kinds[0]], &[5, 1], 3).unwrap();
        let find = |v: &[CorruptionCell], k, s| v.iter().find(|c| c.kind == k && c.severity == s).unwrap().error;
        for k in kinds {
            for s in [1, 5] {
                assert_eq!(find(&a, k, s), find(&b, k, s));
            }
        }
    }
}
