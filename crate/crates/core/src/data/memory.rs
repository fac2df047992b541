use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{herding_select, Dataset, Provenance, Sample, TaskSpec};
use crate::error::{Error, Result};
use crate::image::Image;

pub const DEFAULT_BUDGET_PER_CLASS: usize = 20;

/// Anything that maps images to embedding vectors (the penultimate layer of a model).
pub trait FeatureExtractor {
    fn features(&self, images: &[&Image]) -> Result<Vec<Vec<f32>>>;
}

/// Fixed per-class budget of natural exemplars, each class list kept in herding order.
///
/// The memory doubles as replay source and style source. It counts every read
/// so exemplar-free runs can prove they never touched it.
#[derive(Debug)]
pub struct ExemplarMemory {
    budget_per_class: usize,
    entries: BTreeMap<usize, Vec<Sample>>,
    reads: AtomicUsize,
}

impl Clone for ExemplarMemory {
    fn clone(&self) -> Self {
        Self {
            budget_per_class: self.budget_per_class,
            entries: self.entries.clone(),
            reads: AtomicUsize::new(self.reads.load(Ordering::Relaxed)),
        }
    }
}

impl Default for ExemplarMemory {
    fn default() -> Self {
        Self::new(DEFAULT_BUDGET_PER_CLASS)
    }
}

impl ExemplarMemory {
    pub fn new(budget_per_class: usize) -> Self {
        Self {
            budget_per_class,
            entries: BTreeMap::new(),
            reads: AtomicUsize::new(0),
        }
    }

    pub fn budget_per_class(&self) -> usize {
        self.budget_per_class
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn class_entries(&self, class_id: usize) -> Option<&[Sample]> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.entries.get(&class_id).map(Vec::as_slice)
    }

    /// Number of read accesses since construction.
    pub fn access_count(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    /// Store `samples` (already in herding order) for a class not yet present.
    pub fn insert_class(&mut self, class_id: usize, samples: Vec<Sample>) -> Result<()> {
        if self.entries.contains_key(&class_id) {
            return Err(Error::InvalidArgument(format!(
                "class {class_id} already has exemplars"
            )));
        }
        if samples.len() > self.budget_per_class {
            return Err(Error::InvalidArgument(format!(
                "{} exemplars exceed the budget of {} for class {class_id}",
                samples.len(),
                self.budget_per_class
            )));
        }
        if let Some(bad) = samples.iter().find(|s| s.provenance != Provenance::Natural) {
            return Err(Error::SyntheticInMemory(bad.id));
        }
        if let Some(bad) = samples.iter().find(|s| s.class_id != class_id) {
            return Err(Error::InvalidArgument(format!(
                "sample {} of class {} offered as exemplar of class {class_id}",
                bad.id, bad.class_id
            )));
        }
        self.entries.insert(class_id, samples);
        Ok(())
    }

    /// Add exemplars for every class of `new_task`, chosen by herding on
    /// `extractor` features of that class's samples in `data`. Existing classes
    /// are left untouched.
    pub fn update<F: FeatureExtractor + ?Sized>(
        &mut self,
        new_task: &TaskSpec,
        extractor: &F,
        data: &[&Sample],
    ) -> Result<()> {
        if let Some(c) = new_task.class_ids.iter().find(|c| self.entries.contains_key(c)) {
            return Err(Error::InvalidArgument(format!(
                "class {c} of task {} is already in memory",
                new_task.index
            )));
        }
        for &class_id in &new_task.class_ids {
            let members: Vec<&Sample> = data
                .iter()
                .copied()
                .filter(|s| s.class_id == class_id && s.provenance == Provenance::Natural)
                .collect();
            if members.is_empty() {
                return Err(Error::Empty("class data for exemplar selection"));
            }
            let images: Vec<&Image> = members.iter().map(|s| &s.image).collect();
            let feats = extractor
                .features(&images)?
                .into_iter()
                .map(l2_normalize)
                .collect::<Vec<_>>();
            let m = self.budget_per_class.min(members.len());
            let order = herding_select(&feats, m)?;
            let chosen = order.into_iter().map(|i| members[i].clone()).collect();
            self.insert_class(class_id, chosen)?;
        }
        Ok(())
    }

    /// Draw `k` exemplars uniformly over the union of all stored ones: without
    /// replacement when `k` fits in memory, with replacement otherwise.
    pub fn sample_batch<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<&Sample>> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        let all: Vec<&Sample> = self.entries.values().flatten().collect();
        if all.is_empty() {
            return Err(Error::EmptyMemory);
        }
        if k <= all.len() {
            Ok(index::sample(rng, all.len(), k).into_iter().map(|i| all[i]).collect())
        } else {
            Ok((0..k).map(|_| all[rng.random_range(0..all.len())]).collect())
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Sample> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.entries.values().flatten()
    }

    pub fn to_sidecar(&self) -> MemorySidecar {
        MemorySidecar {
            budget_per_class: self.budget_per_class,
            classes: self
                .entries
                .iter()
                .map(|(&class_id, samples)| ClassExemplars {
                    class_id,
                    exemplars: samples
                        .iter()
                        .enumerate()
                        .map(|(rank, s)| ExemplarRef {
                            sample_id: s.id,
                            herding_rank: rank,
                            file: s.file.clone(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    /// Rebuild a memory from its sidecar by resolving sample ids in `dataset`.
    pub fn from_sidecar(sidecar: &MemorySidecar, dataset: &Dataset) -> Result<Self> {
        let mut mem = ExemplarMemory::new(sidecar.budget_per_class);
        for class in &sidecar.classes {
            let mut refs = class.exemplars.clone();
            refs.sort_by_key(|r| r.herding_rank);
            let samples = refs
                .iter()
                .map(|r| {
                    dataset.train_by_id(r.sample_id).cloned().ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "exemplar sample {} not found in dataset",
                            r.sample_id
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            mem.insert_class(class.class_id, samples)?;
        }
        Ok(mem)
    }
}

fn l2_normalize(mut v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// JSON sidecar persisted next to checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySidecar {
    pub budget_per_class: usize,
    pub classes: Vec<ClassExemplars>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassExemplars {
    pub class_id: usize,
    pub exemplars: Vec<ExemplarRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarRef {
    pub sample_id: u64,
    pub herding_rank: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub file: Option<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    struct MeanPixel;

    impl FeatureExtractor for MeanPixel {
        fn features(&self, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
            Ok(images.iter().map(|i| vec![i.mean(), i.at(0, 0, 0)]).collect())
        }
    }

    fn samples(class_id: usize, n: usize, id0: u64) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let v = (i as f32 * 0.37).sin() * 0.5 + 0.5;
                Sample::natural(id0 + i as u64, class_id, Image::filled(3, 2, 2, v))
            })
            .collect()
    }

    fn task(index: usize, class_ids: Vec<usize>) -> TaskSpec {
        TaskSpec { index, class_ids }
    }

    #[test]
    fn budget_caps_selection() {
        let data = samples(0, 500, 0);
        let refs: Vec<&Sample> = data.iter().collect();
        let mut mem = ExemplarMemory::new(20);
        mem.update(&task(0, vec![0]), &MeanPixel, &refs).unwrap();
        assert_eq!(mem.class_entries(0).unwrap().len(), 20);

        let small = samples(1, 5, 1000);
        let refs: Vec<&Sample> = small.iter().collect();
        mem.update(&task(1, vec![1]), &MeanPixel, &refs).unwrap();
        assert_eq!(mem.class_entries(1).unwrap().len(), 5);
    }

    #[test]
    fn earlier_classes_untouched_by_update() {
        let a = samples(0, 30, 0);
        let b = samples(1, 30, 100);
        let mut mem = ExemplarMemory::new(4);
        mem.update(&task(0, vec![0]), &MeanPixel, &a.iter().collect::<Vec<_>>()).unwrap();
        let before = mem.class_entries(0).unwrap().to_vec();
        mem.update(&task(1, vec![1]), &MeanPixel, &b.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(mem.class_entries(0).unwrap(), before.as_slice());
        // re-adding a class is refused
        assert!(mem.update(&task(2, vec![1]), &MeanPixel, &b.iter().collect::<Vec<_>>()).is_err());
    }

    #[test]
    fn synthetic_samples_rejected() {
        let mut s = samples(0, 1, 0);
        s[0].provenance = Provenance::SyntheticConflict;
        let mut mem = ExemplarMemory::new(3);
        assert!(matches!(mem.insert_class(0, s), Err(Error::SyntheticInMemory(0))));
    }

    #[test]
    fn sampling_membership_and_replacement() {
        let mut mem = ExemplarMemory::new(20);
        mem.insert_class(0, samples(0, 20, 0)).unwrap();
        mem.insert_class(1, samples(1, 20, 100)).unwrap();
        let mut rng = substream(1, "t", 0);
        let batch = mem.sample_batch(128, &mut rng).unwrap();
        assert_eq!(batch.len(), 128);
        let ids: Vec<u64> = mem.iter().map(|s| s.id).collect();
        assert!(batch.iter().all(|s| ids.contains(&s.id)));

        let mut one = ExemplarMemory::new(1);
        one.insert_class(3, samples(3, 1, 9)).unwrap();
        let b = one.sample_batch(4, &mut rng).unwrap();
        assert!(b.iter().all(|s| s.id == 9) && b.len() == 4);

        assert!(matches!(ExemplarMemory::new(2).sample_batch(1, &mut rng), Err(Error::EmptyMemory)));
    }

    #[test]
    fn sampling_is_uniform_over_classes() {
        let mut mem = ExemplarMemory::new(20);
        for c in 0..10 {
            mem.insert_class(c, samples(c, 20, 100 * c as u64)).unwrap();
        }
        let mut rng = substream(2024, "uniformity", 0);
        let batch = mem.sample_batch(10_000, &mut rng).unwrap();
        let mut counts = [0usize; 10];
        batch.iter().for_each(|s| counts[s.class_id] += 1);
        let expected = 1000.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // chi-square critical value, 9 degrees of freedom, alpha = 0.01
        assert!(chi2 < 21.666, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let mut mem = ExemplarMemory::new(20);
        mem.insert_class(0, samples(0, 20, 0)).unwrap();
        let a: Vec<u64> = mem.sample_batch(7, &mut substream(5, "s", 0)).unwrap().iter().map(|s| s.id).collect();
        let b: Vec<u64> = mem.sample_batch(7, &mut substream(5, "s", 0)).unwrap().iter().map(|s| s.id).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn sidecar_round_trip() {
        let data = samples(2, 10, 0);
        let dataset = Dataset {
            class_names: vec!["a".into(), "b".into(), "c".into()],
            train: data.clone(),
            test: vec![],
            holdout_styles: vec![],
        };
        let mut mem = ExemplarMemory::new(3);
        mem.update(&task(0, vec![2]), &MeanPixel, &data.iter().collect::<Vec<_>>()).unwrap();
        let json = serde_json::to_string(&mem.to_sidecar()).unwrap();
        let back: MemorySidecar = serde_json::from_str(&json).unwrap();
        let restored = ExemplarMemory::from_sidecar(&back, &dataset).unwrap();
        assert_eq!(restored.class_entries(2), mem.class_entries(2));
    }
}
