//! Shape-texture debiased class-incremental learning.
//!
//! The crate covers the full experimental pipeline:
//!
//! * [`data`]: task sequences, herding-based exemplar memory, datasets.
//! * [`style`]: AdaIN style transfer, style distortions and shape-texture
//!   conflict batches.
//! * [`losses`]: cross-entropy, logit distillation and the online debiased
//!   self-distillation objective.
//! * [`model`] / [`trainer`]: the cosine-classifier network and the
//!   incremental training loop in all supported modes.
//! * [`eval`]: accuracy, forgetting, corruption robustness, domain-shift proxy
//!   and loss-landscape profiles.
//! * [`experiment`]: config-driven runs, artifacts and run comparison.

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod image;
pub mod losses;
pub mod model;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod style;
pub mod trainer;

pub use error::{Error, Result};
