use rand::Rng;

use super::{distort_style, DistortionConfig, StyleTransferModel};
use crate::data::Provenance;
use crate::error::{Error, Result};
use crate::image::Image;

/// Shape-texture conflict images: content `i` rendered in the (distorted) style of style image `i`.
#[derive(Debug, Clone)]
pub struct ConflictBatch {
    pub images: Vec<Image>,
    pub provenance: Vec<Provenance>,
    /// `(content index, style index)` per output image.
    pub source_pairs: Vec<(usize, usize)>,
}

impl ConflictBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Pair `contents[i]` with a distorted copy of `styles[i]` and stylize.
/// Distortions touch the style copies only; content images are read-only.
pub fn generate_conflict_batch<R: Rng + ?Sized>(
    contents: &[&Image],
    styles: &[&Image],
    model: &StyleTransferModel,
    config: &DistortionConfig,
    rng: &mut R,
) -> Result<ConflictBatch> {
    if contents.len() != styles.len() {
        return Err(Error::Shape(format!(
            "content batch of {} but style batch of {}",
            contents.len(),
            styles.len()
        )));
    }
    let distorted: Vec<Image> = styles.iter().map(|s| distort_style(s, config, rng)).collect();
    let refs: Vec<&Image> = distorted.iter().collect();
    let images = model.stylize_batch(contents, &refs)?;
    let n = images.len();
    Ok(ConflictBatch {
        images,
        provenance: vec![Provenance::SyntheticConflict; n],
        source_pairs: (0..n).map(|i| (i, i)).collect(),
    })
}
