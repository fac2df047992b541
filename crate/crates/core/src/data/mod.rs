//! Class-incremental data: datasets, task sequences, herding and the exemplar memory.

mod folder;
mod herding;
mod memory;
mod synthetic;
mod tasks;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::image::Image;

pub use folder::{load_image_folder, load_style_folder};
pub use herding::herding_select;
pub use memory::{ExemplarMemory, FeatureExtractor, MemorySidecar, DEFAULT_BUDGET_PER_CLASS};
pub use synthetic::{generate_synthetic, SyntheticConfig};
pub use tasks::{build_task_sequence, TaskSequence, TaskSpec};

/// Where a sample came from. Conflict images are never stored as exemplars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Natural,
    SyntheticConflict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// Global dataset class id.
    pub class_id: usize,
    pub image: Image,
    pub provenance: Provenance,
    /// Backing file for folder datasets.
    pub file: Option<PathBuf>,
}

impl Sample {
    pub fn natural(id: u64, class_id: usize, image: Image) -> Self {
        Self {
            id,
            class_id,
            image,
            provenance: Provenance::Natural,
            file: None,
        }
    }
}

/// A labelled train/test split plus optional held-out style images used to
/// build the domain-shift proxy set.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub holdout_styles: Vec<Image>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_dims(&self) -> Option<(usize, usize, usize)> {
        self.train.first().map(|s| s.image.dims())
    }

    pub fn train_for<'a>(&'a self, classes: &'a [usize]) -> impl Iterator<Item = &'a Sample> + 'a {
        self.train.iter().filter(move |s| classes.contains(&s.class_id))
    }

    pub fn test_for<'a>(&'a self, classes: &'a [usize]) -> impl Iterator<Item = &'a Sample> + 'a {
        self.test.iter().filter(move |s| classes.contains(&s.class_id))
    }

    pub fn train_by_id(&self, id: u64) -> Option<&Sample> {
        self.train.iter().find(|s| s.id == id)
    }
}
