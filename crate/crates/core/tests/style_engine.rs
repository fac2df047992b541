use std::sync::OnceLock;

use stcl::data::{generate_synthetic, ExemplarMemory, Provenance, Sample, SyntheticConfig};
use stcl::image::Image;
use stcl::rng::substream;
use stcl::style::{
    distort_style, generate_conflict_batch, DecoderTraining, DistortionConfig, StyleModelConfig, StyleTransferModel,
};
use stcl::Error;

struct Fixture {
    images: Vec<Image>,
    model: StyleTransferModel,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = SyntheticConfig {
            num_classes: 6,
            train_per_class: 20,
            test_per_class: 1,
            holdout_styles: 0,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg, 21).unwrap();
        let images: Vec<Image> = ds.train.into_iter().map(|s| s.image).collect();
        let refs: Vec<&Image> = images.iter().collect();
        let mut rng = substream(21, "decoder", 0);
        let mut model = StyleTransferModel::new(StyleModelConfig::default(), 21, &mut rng).unwrap();
        model
            .train_decoder(&refs, &DecoderTraining { steps: 200, ..Default::default() }, &mut rng)
            .unwrap();
        Fixture { images, model }
    })
}

fn dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

#[test]
fn stylized_statistics_move_toward_the_style() {
    let f = fixture();
    let n = f.images.len();
    let mut closer = 0;
    let pairs = 40;
    for i in 0..pairs {
        let c = &f.images[(7 * i) % n];
        let s = &f.images[(13 * i + 61) % n];
        let out = f.model.stylize(c, s).unwrap();
        let st = f.model.feature_stats(&[&out, c, s]).unwrap();
        if dist(&st[0], &st[2]) < dist(&st[0], &st[1]) {
            closer += 1;
        }
    }
    assert!(closer * 2 > pairs, "only {closer}/{pairs} pairs moved toward the style");
}

#[test]
fn self_reconstruction_within_recorded_bound() {
    let f = fixture();
    let bound = f.model.reconstruction_bound().unwrap();
    assert!(bound.is_finite() && bound > 0.0);
    let probe: Vec<&Image> = f.images.iter().step_by(5).collect();
    let out = f.model.stylize_batch(&probe, &probe).unwrap();
    let mean = out.iter().zip(&probe).map(|(o, c)| o.mse(c)).sum::<f32>() / probe.len() as f32;
    assert!(mean <= bound, "mean reconstruction {mean} above bound {bound}");
}

#[test]
fn conflict_batch_contract() {
    let f = fixture();
    let k = 128;
    let contents: Vec<&Image> = (0..k).map(|i| &f.images[i % f.images.len()]).collect();
    let styles: Vec<&Image> = (0..k).map(|i| &f.images[(i * 7 + 3) % f.images.len()]).collect();
    let before: Vec<u64> = contents.iter().map(|c| c.checksum()).collect();
    let cfg = DistortionConfig::default();
    let a = generate_conflict_batch(&contents, &styles, &f.model, &cfg, &mut substream(1, "g", 0)).unwrap();
    assert_eq!(a.len(), k);
    assert!(a.provenance.iter().all(|p| *p == Provenance::SyntheticConflict));
    assert!(a.source_pairs.iter().enumerate().all(|(i, &p)| p == (i, i)));
    let after: Vec<u64> = contents.iter().map(|c| c.checksum()).collect();
    assert_eq!(before, after, "content images were mutated");
    let b = generate_conflict_batch(&contents, &styles, &f.model, &cfg, &mut substream(1, "g", 0)).unwrap();
    assert_eq!(a.images, b.images);

    assert!(matches!(
        generate_conflict_batch(&contents[..3], &styles[..2], &f.model, &cfg, &mut substream(1, "g", 0)),
        Err(Error::Shape(_))
    ));
}

#[test]
fn identity_distortion_with_self_styles_is_plain_reconstruction() {
    let f = fixture();
    let xs: Vec<&Image> = f.images.iter().take(10).collect();
    let batch =
        generate_conflict_batch(&xs, &xs, &f.model, &DistortionConfig::identity(), &mut substream(2, "g", 0)).unwrap();
    for (out, x) in batch.images.iter().zip(&xs) {
        assert_eq!(out, &f.model.stylize(x, x).unwrap());
    }
}

#[test]
fn distortions_only_touch_style_copies() {
    let f = fixture();
    let img = f.images[0].clone();
    let sum = img.checksum();
    let mut rng = substream(3, "d", 0);
    for _ in 0..10 {
        let _ = distort_style(&img, &DistortionConfig::default(), &mut rng);
    }
    assert_eq!(img.checksum(), sum);
}

#[test]
fn memory_rejects_conflict_images() {
    let f = fixture();
    let contents = [&f.images[0]];
    let batch = generate_conflict_batch(
        &contents,
        &[&f.images[1]],
        &f.model,
        &DistortionConfig::default(),
        &mut substream(4, "g", 0),
    )
    .unwrap();
    let mut forged = Sample::natural(999, 0, batch.images[0].clone());
    forged.provenance = batch.provenance[0];
    let mut mem = ExemplarMemory::new(20);
    assert!(matches!(mem.insert_class(0, vec![forged]), Err(Error::SyntheticInMemory(999))));
}
