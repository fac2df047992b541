use candle_core::Device;
use stcl::data::{build_task_sequence, generate_synthetic, Dataset, Sample, SyntheticConfig, TaskSequence};
use stcl::eval::{evaluate_step_accuracy, Predictor};
use stcl::image::{images_to_tensor, Image};
use stcl::losses::LossWeights;
use stcl::model::BackboneConfig;
use stcl::rng::substream;
use stcl::style::{DecoderTraining, DistortionConfig, StyleModelConfig, StyleTransferModel};
use stcl::trainer::{
    compute_losses, LossInputs, ReplayInputs, Schedule, TrainerConfig, TrainerState, TrainingMode,
};
use stcl::Error;

fn small_data(seed: u64) -> (Dataset, TaskSequence) {
    let cfg = SyntheticConfig {
        num_classes: 4,
        train_per_class: 24,
        test_per_class: 10,
        image_size: 8,
        max_shift: 1,
        holdout_styles: 4,
        texture_consistency: 1.0,
        ..Default::default()
    };
    (generate_synthetic(&cfg, seed).unwrap(), build_task_sequence(4, 1, seed).unwrap())
}

fn config(mode: TrainingMode) -> TrainerConfig {
    TrainerConfig {
        mode,
        schedule: Schedule {
            base_epochs: 6,
            incremental_epochs: 3,
            batch_size: 16,
            base_lr: 0.05,
            incremental_lr: 0.02,
            warmup_epochs: 0,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn backbone() -> BackboneConfig {
    BackboneConfig {
        widths: [4, 8, 8],
        ..Default::default()
    }
}

fn style_model(ds: &Dataset, tasks: &TaskSequence) -> StyleTransferModel {
    let mut rng = substream(0, "style", 0);
    let mut m = StyleTransferModel::new(StyleModelConfig { width: 8, stages: 1, alpha: 1.0 }, 0, &mut rng).unwrap();
    let imgs: Vec<&Image> = ds.train_for(&tasks.task(0).class_ids).map(|s| &s.image).collect();
    m.train_decoder(&imgs, &DecoderTraining { steps: 15, batch_size: 8, ..Default::default() }, &mut rng)
        .unwrap();
    m
}

fn task_data<'a>(ds: &'a Dataset, tasks: &'a TaskSequence, t: usize) -> Vec<&'a Sample> {
    ds.train_for(&tasks.task(t).class_ids).collect()
}

#[test]
fn base_task_trains_above_chance_and_fills_memory() {
    let (ds, tasks) = small_data(1);
    let mut st = TrainerState::new(config(TrainingMode::Standard), backbone(), tasks.clone(), 1).unwrap();
    assert!(matches!(st.train_base_task(&[], None), Err(Error::Empty(_))));
    st.train_base_task(&task_data(&ds, &tasks, 0), None).unwrap();
    assert!(st.train_base_task(&task_data(&ds, &tasks, 0), None).is_err());

    let test: Vec<&Sample> = ds.test_for(&tasks.task(0).class_ids).collect();
    let imgs: Vec<&Image> = test.iter().map(|s| &s.image).collect();
    let labels: Vec<usize> = test.iter().map(|s| tasks.column_of(s.class_id).unwrap()).collect();
    let acc = evaluate_step_accuracy(&st.model, &imgs, &labels).unwrap();
    assert!(acc > 100.0 / 2.0, "base accuracy {acc} not above chance");

    for &c in &tasks.task(0).class_ids {
        assert_eq!(st.memory.class_entries(c).unwrap().len(), 20.min(24));
    }
    let old = st.old_model.as_ref().unwrap();
    assert!(old.is_frozen());
    let x = images_to_tensor(imgs.iter().copied(), &Device::Cpu).unwrap();
    let a: Vec<f32> = st.model.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let b: Vec<f32> = old.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    assert_eq!(a, b);
}

#[test]
fn incremental_step_bookkeeping_and_freeze() {
    let (ds, tasks) = small_data(2);
    let mut st = TrainerState::new(config(TrainingMode::Standard), backbone(), tasks.clone(), 2).unwrap();
    assert!(st.train_incremental_step(&task_data(&ds, &tasks, 1), None).is_err());
    st.train_base_task(&task_data(&ds, &tasks, 0), None).unwrap();
    let old_sum = st.old_model.as_ref().unwrap().params().checksum().unwrap();
    let old_ref = st.old_model.as_ref().unwrap().snapshot().unwrap();
    // wrong-task data is refused
    assert!(st.train_incremental_step(&task_data(&ds, &tasks, 0), None).is_err());
    st.train_incremental_step(&task_data(&ds, &tasks, 1), None).unwrap();
    assert_eq!(st.model.num_classes(), tasks.seen_classes(1));
    assert_eq!(old_ref.params().checksum().unwrap(), old_sum);
    assert_eq!(st.instruments.replay_conflict_rows, 0);
    assert!(st.instruments.replay_natural_rows > 0);
    assert!(st.memory.access_count() > 0);
    assert_eq!(st.log.len(), 6 + 3);
    assert!(st.log.iter().all(|r| r.total.is_finite()));
    assert!((st.log[6].lambda - 20.0 * 2f64.powf(2.0 / 3.0)).abs() < 1e-9);
}

#[test]
fn incremental_loss_decreases_on_separable_tasks() {
    let (ds, tasks) = small_data(3);
    let mut cfg = config(TrainingMode::Standard);
    cfg.schedule.incremental_epochs = 8;
    let mut st = TrainerState::new(cfg, backbone(), tasks.clone(), 3).unwrap();
    st.train_base_task(&task_data(&ds, &tasks, 0), None).unwrap();
    let report = st.train_incremental_step(&task_data(&ds, &tasks, 1), None).unwrap();
    assert!(report.last_total().unwrap() < report.first_total, "{report:?}");
}

#[test]
fn empty_memory_in_replay_mode_points_to_exemplar_free() {
    let (ds, tasks) = small_data(4);
    let mut st = TrainerState::new(config(TrainingMode::Standard), backbone(), tasks.clone(), 4).unwrap();
    st.train_base_task(&task_data(&ds, &tasks, 0), None).unwrap();
    st.memory = stcl::data::ExemplarMemory::new(20);
    let err = st.train_incremental_step(&task_data(&ds, &tasks, 1), None).unwrap_err();
    assert!(matches!(err, Error::EmptyMemory));
    assert!(err.to_string().contains("exemplar-free"));
}

#[test]
fn debiased_modes_count_what_enters_replay() {
    let (ds, tasks) = small_data(5);
    let style = style_model(&ds, &tasks);
    let run = |debias_replay: bool| {
        let mut cfg = config(TrainingMode::Debiased);
        cfg.debias_replay = debias_replay;
        cfg.schedule.base_epochs = 2;
        cfg.schedule.incremental_epochs = 1;
        let mut st = TrainerState::new(cfg, backbone(), tasks.clone(), 5).unwrap();
        assert!(st.train_base_task(&task_data(&ds, &tasks, 0), None).is_err());
        st.train_base_task(&task_data(&ds, &tasks, 0), Some(&style)).unwrap();
        st.train_incremental_step(&task_data(&ds, &tasks, 1), Some(&style)).unwrap();
        st
    };
    let pure = run(false);
    assert_eq!(pure.instruments.replay_conflict_rows, 0);
    assert!(pure.instruments.conflict_images_generated > 0);
    assert!(pure.log.iter().all(|r| r.std.is_finite() && r.std >= 0.0));
    let mixed = run(true);
    assert!(mixed.instruments.replay_conflict_rows > 0);
    // conflict images never reach the exemplar memory
    assert!(mixed.memory.iter().all(|s| s.provenance == stcl::data::Provenance::Natural));
}

#[test]
fn exemplar_free_modes_never_touch_memory() {
    let (ds, tasks) = small_data(6);
    let style = style_model(&ds, &tasks);
    for mode in [TrainingMode::ExemplarFreeStandard, TrainingMode::ExemplarFreeDebiased] {
        let mut cfg = config(mode);
        cfg.schedule.base_epochs = 2;
        cfg.schedule.incremental_epochs = 1;
        let mut st = TrainerState::new(cfg, backbone(), tasks.clone(), 6).unwrap();
        st.train_base_task(&task_data(&ds, &tasks, 0), Some(&style)).unwrap();
        st.train_incremental_step(&task_data(&ds, &tasks, 1), Some(&style)).unwrap();
        assert_eq!(st.memory.access_count(), 0, "{mode}");
        assert!(st.memory.is_empty());
        assert_eq!(st.instruments.replay_natural_rows, 0);
    }
}

#[test]
fn style_source_ablation_counts_classes() {
    let (ds, tasks) = small_data(7);
    let style = style_model(&ds, &tasks);
    let distinct = |source| {
        let mut cfg = config(TrainingMode::Debiased);
        cfg.style_source = source;
        cfg.schedule.base_epochs = 1;
        cfg.schedule.incremental_epochs = 2;
        let mut st = TrainerState::new(cfg, backbone(), tasks.clone(), 7).unwrap();
        st.train_base_task(&task_data(&ds, &tasks, 0), Some(&style)).unwrap();
        st.train_incremental_step(&task_data(&ds, &tasks, 1), Some(&style)).unwrap();
        st.instruments
            .style_epochs
            .iter()
            .filter(|r| r.step == 1)
            .map(|r| r.distinct_classes)
            .collect::<Vec<_>>()
    };
    let ex = distinct(stcl::trainer::StyleSource::Exemplars);
    let cur = distinct(stcl::trainer::StyleSource::CurrentTask);
    assert_eq!(ex.len(), 2);
    assert!(ex.iter().zip(&cur).all(|(e, c)| e >= c));
    assert!(cur.iter().all(|&c| c <= tasks.task(1).num_classes()));
}

#[test]
fn debiased_iteration_reduces_to_standard_on_doubled_batch() {
    let (ds, tasks) = small_data(8);
    let mut st = TrainerState::new(config(TrainingMode::Standard), backbone(), tasks.clone(), 8).unwrap();
    st.train_base_task(&task_data(&ds, &tasks, 0), None).unwrap();
    st.model.extend_classifier(2, &mut substream(8, "ext", 0)).unwrap();
    let old = st.old_model.as_ref().unwrap();

    let cur: Vec<&Sample> = task_data(&ds, &tasks, 1).into_iter().take(6).collect();
    let rep: Vec<&Sample> = task_data(&ds, &tasks, 0).into_iter().take(5).collect();
    let col = |s: &&Sample| tasks.column_of(s.class_id).unwrap();
    let x = images_to_tensor(cur.iter().map(|s| &s.image), &Device::Cpu).unwrap();
    let y: Vec<usize> = cur.iter().map(col).collect();
    let xr = images_to_tensor(rep.iter().map(|s| &s.image), &Device::Cpu).unwrap();
    let yr: Vec<usize> = rep.iter().map(col).collect();
    let weights = LossWeights { gamma: 0.0, ..Default::default() };
    let lambda = st.lambda();

    let debiased = LossInputs {
        natural: &x,
        labels: &y,
        conflict: Some(&x),
        replay: Some(ReplayInputs { natural: &xr, labels: &yr, conflict: None }),
    };
    let (_, d) = compute_losses(&st.model, Some(old), &debiased, &weights, lambda, TrainingMode::Debiased).unwrap();

    let x2 = candle_core::Tensor::cat(&[&x, &x], 0).unwrap();
    let y2: Vec<usize> = y.iter().chain(&y).copied().collect();
    let standard = LossInputs {
        natural: &x2,
        labels: &y2,
        conflict: None,
        replay: Some(ReplayInputs { natural: &xr, labels: &yr, conflict: None }),
    };
    let (_, s) = compute_losses(&st.model, Some(old), &standard, &weights, lambda, TrainingMode::Standard).unwrap();
    assert!((d.total - s.total).abs() < 1e-5, "{} vs {}", d.total, s.total);
    assert!(d.std.abs() < 1e-6, "identical pairs have zero self-distillation loss");

    assert!(compute_losses(&st.model, Some(old), &debiased, &weights, lambda, TrainingMode::Standard).is_err());
}

#[test]
fn b1_batches_match_standard_when_disabled_and_are_reproducible() {
    let (ds, tasks) = small_data(9);
    let data = task_data(&ds, &tasks, 0);
    let mut b1 = config(TrainingMode::B1Augment);
    b1.b1 = DistortionConfig::identity();
    let off = TrainerState::new(b1, backbone(), tasks.clone(), 9).unwrap();
    let std = TrainerState::new(config(TrainingMode::Standard), backbone(), tasks.clone(), 9).unwrap();
    let a = off.epoch_batches(&data, 0, None).unwrap();
    let b = std.epoch_batches(&data, 0, None).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.natural, y.natural);
        assert_eq!(x.labels, y.labels);
    }

    let on = TrainerState::new(config(TrainingMode::B1Augment), backbone(), tasks.clone(), 9).unwrap();
    let e1 = on.epoch_batches(&data, 1, None).unwrap();
    let e2 = on.epoch_batches(&data, 1, None).unwrap();
    let flat = |v: &[stcl::trainer::IterationBatch]| v.iter().flat_map(|b| b.natural.clone()).collect::<Vec<_>>();
    assert_eq!(flat(&e1), flat(&e2));
    assert_ne!(flat(&e1), flat(&b));
}

#[test]
fn run_mode_b1_trains_only_in_its_mode() {
    let (ds, tasks) = small_data(10);
    let mut cfg = config(TrainingMode::B1Augment);
    cfg.schedule.base_epochs = 1;
    cfg.schedule.incremental_epochs = 1;
    let mut st = TrainerState::new(cfg, backbone(), tasks.clone(), 10).unwrap();
    st.run_mode_b1(&task_data(&ds, &tasks, 0)).unwrap();
    st.run_mode_b1(&task_data(&ds, &tasks, 1)).unwrap();
    assert_eq!(st.step, 2);
    let mut other = TrainerState::new(config(TrainingMode::Standard), backbone(), tasks.clone(), 10).unwrap();
    assert!(other.run_mode_b1(&task_data(&ds, &tasks, 0)).is_err());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (ds, tasks) = small_data(11);
    let mut cfg = config(TrainingMode::Standard);
    cfg.schedule.base_epochs = 2;
    cfg.schedule.incremental_epochs = 2;
    let mut full = TrainerState::new(cfg.clone(), backbone(), tasks.clone(), 11).unwrap();
    full.train_base_task(&task_data(&ds, &tasks, 0), None).unwrap();
    full.train_incremental_step(&task_data(&ds, &tasks, 1), None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut part = TrainerState::new(cfg, backbone(), tasks.clone(), 11).unwrap();
    part.train_base_task(&task_data(&ds, &tasks, 0), None).unwrap();
    part.save(dir.path()).unwrap();
    drop(part);
    let mut resumed = TrainerState::load(dir.path(), &ds).unwrap();
    assert_eq!(resumed.step, 1);
    resumed.train_incremental_step(&task_data(&ds, &tasks, 1), None).unwrap();
    assert_eq!(resumed.model.params().checksum().unwrap(), full.model.params().checksum().unwrap());
    assert_eq!(resumed.log, full.log);

    let probe: Vec<&Image> = ds.test.iter().take(8).map(|s| &s.image).collect();
    assert_eq!(resumed.model.predict(&probe).unwrap(), full.model.predict(&probe).unwrap());
}
