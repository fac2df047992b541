//! Incremental training loop: base task, incremental steps with replay and
//! distillation, the debiased variants and the naturalistic-augmentation baseline.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ExemplarMemory, MemorySidecar, Sample, TaskSequence, DEFAULT_BUDGET_PER_CLASS};
use crate::error::{Error, Result};
use crate::image::{images_to_tensor, Image};
use crate::losses::{
    adaptive_lambda, cross_entropy, kd_loss, std_loss, total_loss_debiased, total_loss_standard, BatchTerms,
    LossWeights, ReplayTerms,
};
use crate::model::{BackboneConfig, IncrementalModel};
use crate::nn::SgdMomentum;
use crate::rng::substream;
use crate::style::{distort_style, generate_conflict_batch, DistortionConfig, StyleTransferModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    #[default]
    Standard,
    Debiased,
    ExemplarFreeStandard,
    ExemplarFreeDebiased,
    B1Augment,
}

impl TrainingMode {
    pub const ALL: [TrainingMode; 5] = [
        TrainingMode::Standard,
        TrainingMode::Debiased,
        TrainingMode::ExemplarFreeStandard,
        TrainingMode::ExemplarFreeDebiased,
        TrainingMode::B1Augment,
    ];

    pub fn uses_exemplars(self) -> bool {
        !matches!(self, Self::ExemplarFreeStandard | Self::ExemplarFreeDebiased)
    }

    pub fn is_debiased(self) -> bool {
        matches!(self, Self::Debiased | Self::ExemplarFreeDebiased)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::Debiased => "debiased",
            Self::ExemplarFreeStandard => "exemplar_free_standard",
            Self::ExemplarFreeDebiased => "exemplar_free_debiased",
            Self::B1Augment => "b1_augment",
        }
    }
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

/// Where conflict-image styles come from at incremental steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleSource {
    /// The replay batch drawn from exemplar memory.
    #[default]
    Exemplars,
    /// Random images of the current task's training set.
    CurrentTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub base_epochs: usize,
    pub incremental_epochs: usize,
    pub batch_size: usize,
    /// Replay batch size; `None` uses `batch_size`.
    pub replay_batch_size: Option<usize>,
    pub base_lr: f64,
    pub incremental_lr: f64,
    /// Cosine schedule floor.
    pub min_lr: f64,
    /// Epochs of linear learning-rate warmup at the start of every step.
    pub warmup_epochs: usize,
    /// Global gradient-norm clip; `None` disables it.
    pub max_grad_norm: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_epochs: 30,
            incremental_epochs: 20,
            batch_size: 32,
            replay_batch_size: None,
            base_lr: 0.1,
            incremental_lr: 0.05,
            min_lr: 1e-4,
            warmup_epochs: 2,
            max_grad_norm: Some(2.0),
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.replay_batch_size == Some(0) {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("incremental_lr", self.incremental_lr),
            ("min_lr", self.min_lr),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("schedule.{name} must be a finite non-negative number")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum must lie in [0, 1) and weight_decay must be >= 0".into()));
        }
        if self.max_grad_norm.is_some_and(|m| !(m.is_finite() && m > 0.0)) {
            return Err(Error::Config("schedule.max_grad_norm must be positive".into()));
        }
        Ok(())
    }

    fn replay_k(&self) -> usize {
        self.replay_batch_size.unwrap_or(self.batch_size)
    }

    /// Linear ramp over the first `warmup` iterations, then cosine decay from
    /// `base` to `min_lr` over the remaining ones.
    pub fn lr_at(&self, base: f64, iteration: usize, total: usize, warmup: usize) -> f64 {
        let warmup = warmup.min(total.saturating_sub(1));
        if iteration < warmup {
            return base * (iteration + 1) as f64 / (warmup + 1) as f64;
        }
        let (iteration, total) = (iteration - warmup, total - warmup);
        if total <= 1 {
            return base;
        }
        let progress = iteration as f64 / (total - 1) as f64;
        let floor = self.min_lr.min(base);
        floor + 0.5 * (base - floor) * (1.0 + (PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Set from the experiment's top-level mode, never from the trainer table.
    #[serde(skip)]
    pub mode: TrainingMode,
    pub weights: LossWeights,
    pub schedule: Schedule,
    /// Distortions applied to style images before stylization.
    pub distortion: DistortionConfig,
    /// Augmentation of the naturalistic baseline, applied to training images.
    pub b1: DistortionConfig,
    pub style_source: StyleSource,
    /// Ablation: also feed conflict images of exemplars into the replay losses.
    pub debias_replay: bool,
    pub memory_budget: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            mode: TrainingMode::Standard,
            weights: LossWeights::default(),
            schedule: Schedule::default(),
            distortion: DistortionConfig::default(),
            b1: DistortionConfig::default(),
            style_source: StyleSource::Exemplars,
            debias_replay: false,
            memory_budget: DEFAULT_BUDGET_PER_CLASS,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.schedule.validate()?;
        self.distortion.validate()?;
        self.b1.validate()?;
        if self.mode.uses_exemplars() && self.memory_budget == 0 {
            return Err(Error::Config("memory_budget must be positive in replay modes".into()));
        }
        if self.debias_replay && self.mode != TrainingMode::Debiased {
            return Err(Error::Config("debias_replay only applies to the debiased replay mode".into()));
        }
        Ok(())
    }

    fn effective_style_source(&self, step: usize) -> StyleSource {
        if step == 0 || !self.mode.uses_exemplars() {
            StyleSource::CurrentTask
        } else {
            self.style_source
        }
    }
}

/// Counters that let tests and reports prove what entered which loss.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Instrumentation {
    /// Conflict-provenance rows that entered replay CE/KD.
    pub replay_conflict_rows: usize,
    pub replay_natural_rows: usize,
    pub conflict_images_generated: usize,
    pub style_epochs: Vec<StyleEpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleEpochRecord {
    pub step: usize,
    pub epoch: usize,
    /// Distinct class ids among the style images of the epoch.
    pub distinct_classes: usize,
}

/// Per-epoch means of every loss component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub epoch: usize,
    pub iterations: usize,
    pub ce: f64,
    pub kd: f64,
    pub replay_ce: f64,
    pub replay_kd: f64,
    pub std: f64,
    pub total: f64,
    pub lambda: f64,
    pub lr: f64,
}

/// Scalar values of one iteration's components.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kd: f64,
    pub replay_ce: f64,
    pub replay_kd: f64,
    pub std: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: usize,
    pub first_total: f64,
    pub epochs: Vec<TrainLogRow>,
}

impl StepReport {
    pub fn last_total(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.total)
    }
}

/// Images and labels (output columns) of one iteration, before the forward pass.
#[derive(Debug, Clone)]
pub struct IterationBatch {
    pub natural: Vec<Image>,
    pub labels: Vec<usize>,
    pub conflict: Option<Vec<Image>>,
    pub style_classes: Vec<usize>,
    pub replay: Option<ReplayBatch>,
}

#[derive(Debug, Clone)]
pub struct ReplayBatch {
    pub natural: Vec<Image>,
    pub labels: Vec<usize>,
    pub conflict: Option<Vec<Image>>,
}

/// Tensors for [`compute_losses`].
pub struct LossInputs<'a> {
    pub natural: &'a Tensor,
    pub labels: &'a [usize],
    pub conflict: Option<&'a Tensor>,
    pub replay: Option<ReplayInputs<'a>>,
}

pub struct ReplayInputs<'a> {
    pub natural: &'a Tensor,
    pub labels: &'a [usize],
    pub conflict: Option<&'a Tensor>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// One iteration's objective. Natural and conflict rows share a single CE/KD
/// average; replay terms see exemplar rows only unless conflict replay rows
/// are passed explicitly.
pub fn compute_losses(
    model: &IncrementalModel,
    old_model: Option<&IncrementalModel>,
    inputs: &LossInputs<'_>,
    weights: &LossWeights,
    lambda: f64,
    mode: TrainingMode,
) -> Result<(Tensor, LossBreakdown)> {
    let k = inputs.labels.len();
    if inputs.natural.dims()[0] != k {
        return Err(Error::Shape("natural batch and labels differ in length".into()));
    }
    if inputs.conflict.is_some() && !mode.is_debiased() {
        return Err(Error::InvalidArgument(format!("mode {mode} takes no conflict batch")));
    }
    if let Some(c) = inputs.conflict {
        if c.dims()[0] != k {
            return Err(Error::Shape("conflict batch must match the natural batch".into()));
        }
    }

    // one forward pass over every row
    let mut parts = vec![inputs.natural.clone()];
    let mut labels: Vec<usize> = inputs.labels.to_vec();
    if let Some(c) = inputs.conflict {
        parts.push(c.clone());
        labels.extend_from_slice(inputs.labels);
    }
    let current_rows = labels.len();
    let mut replay_labels = Vec::new();
    let mut replay_natural_rows = 0;
    if let Some(r) = &inputs.replay {
        parts.push(r.natural.clone());
        replay_labels.extend_from_slice(r.labels);
        replay_natural_rows = r.labels.len();
        if let Some(c) = r.conflict {
            parts.push(c.clone());
            replay_labels.extend_from_slice(r.labels);
        }
    }
    let x = Tensor::cat(&parts, 0)?;
    let logits = model.forward(&x)?;
    let old_logits = old_model.map(|m| m.forward(&x)).transpose()?;

    let cur = logits.narrow(0, 0, current_rows)?;
    let ce_current = cross_entropy(&cur, &labels)?;
    let kd_current = old_logits
        .as_ref()
        .map(|o| kd_loss(&cur, &o.narrow(0, 0, current_rows)?, weights.tau_kd))
        .transpose()?;
    let mut std_term = None;
    if inputs.conflict.is_some() {
        std_term = Some(std_loss(
            &logits.narrow(0, 0, k)?,
            &logits.narrow(0, k, k)?,
            weights.tau_std,
            weights.detach_std_target,
        )?);
    }
    let replay = if inputs.replay.is_some() {
        let rows = replay_labels.len();
        let rl = logits.narrow(0, current_rows, rows)?;
        let ce = cross_entropy(&rl, &replay_labels)?;
        let kd = old_logits
            .as_ref()
            .map(|o| kd_loss(&rl, &o.narrow(0, current_rows, rows)?, weights.tau_kd))
            .transpose()?;
        if rows > replay_natural_rows {
            let extra = std_loss(
                &rl.narrow(0, 0, replay_natural_rows)?,
                &rl.narrow(0, replay_natural_rows, replay_natural_rows)?,
                weights.tau_std,
                weights.detach_std_target,
            )?;
            std_term = Some(match std_term {
                Some(s) => (s + extra)?,
                None => extra,
            });
        }
        Some(ReplayTerms { ce, kd })
    } else {
        None
    };

    let terms = BatchTerms {
        ce_current,
        kd_current,
        replay,
        std: std_term,
        natural_rows: k,
        conflict_rows: if inputs.conflict.is_some() { k } else { 0 },
    };
    let exemplar_free = !mode.uses_exemplars() || old_model.is_none();
    let total = if mode.is_debiased() {
        total_loss_debiased(&terms, lambda, weights.gamma, exemplar_free)?
    } else {
        total_loss_standard(&terms, lambda, exemplar_free)?
    };
    let opt = |t: Option<&Tensor>| t.map(scalar).transpose().map(|v| v.unwrap_or(0.0));
    let breakdown = LossBreakdown {
        ce: scalar(&terms.ce_current)?,
        kd: opt(terms.kd_current.as_ref())?,
        replay_ce: opt(terms.replay.as_ref().map(|r| &r.ce))?,
        replay_kd: opt(terms.replay.as_ref().and_then(|r| r.kd.as_ref()))?,
        std: opt(terms.std.as_ref())?,
        total: scalar(&total)?,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    Ok((total, breakdown))
}

/// Everything that persists between steps of one run.
#[derive(Debug)]
pub struct TrainerState {
    /// Index of the next task to train.
    pub step: usize,
    pub model: IncrementalModel,
    pub old_model: Option<IncrementalModel>,
    pub memory: ExemplarMemory,
    pub config: TrainerConfig,
    pub tasks: TaskSequence,
    pub seed: u64,
    pub instruments: Instrumentation,
    pub log: Vec<TrainLogRow>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    step: usize,
    seed: u64,
    mode: TrainingMode,
    num_classes: usize,
    config: TrainerConfig,
    backbone: BackboneConfig,
    task_classes: Vec<Vec<usize>>,
    instruments: Instrumentation,
    log: Vec<TrainLogRow>,
    memory: MemorySidecar,
}

impl TrainerState {
    pub fn new(config: TrainerConfig, backbone: BackboneConfig, tasks: TaskSequence, seed: u64) -> Result<Self> {
        config.validate()?;
        let model = IncrementalModel::new(backbone, &mut substream(seed, "model-init", 0))?;
        Ok(Self {
            step: 0,
            model,
            old_model: None,
            memory: ExemplarMemory::new(config.memory_budget),
            config,
            tasks,
            seed,
            instruments: Instrumentation::default(),
            log: Vec::new(),
        })
    }

    pub fn mode(&self) -> TrainingMode {
        self.config.mode
    }

    fn column(&self, class_id: usize) -> Result<usize> {
        self.tasks
            .column_of(class_id)
            .ok_or_else(|| Error::InvalidArgument(format!("class {class_id} is not part of the task sequence")))
    }

    /// Loss weight on distillation at the current step.
    pub fn lambda(&self) -> f64 {
        if self.step == 0 {
            self.config.weights.lambda_base
        } else {
            adaptive_lambda(
                self.tasks.seen_classes(self.step),
                self.tasks.task(self.step).num_classes(),
                self.config.weights.lambda_base,
            )
        }
    }

    /// Train on the base task. Requires `step == 0`.
    pub fn train_base_task(&mut self, data: &[&Sample], style: Option<&StyleTransferModel>) -> Result<StepReport> {
        if self.step != 0 {
            return Err(Error::InvalidArgument(format!(
                "base task already trained (next step is {})",
                self.step
            )));
        }
        self.train_step(data, style)
    }

    /// Train incremental step `self.step >= 1`.
    pub fn train_incremental_step(
        &mut self,
        data: &[&Sample],
        style: Option<&StyleTransferModel>,
    ) -> Result<StepReport> {
        if self.step == 0 || self.old_model.is_none() {
            return Err(Error::InvalidArgument("incremental step before the base task".into()));
        }
        self.train_step(data, style)
    }

    /// Dispatch the next step of a naturalistic-augmentation run.
    pub fn run_mode_b1(&mut self, data: &[&Sample]) -> Result<StepReport> {
        if self.config.mode != TrainingMode::B1Augment {
            return Err(Error::InvalidArgument(format!("run_mode_b1 called in mode {}", self.config.mode)));
        }
        self.train_step(data, None)
    }

    fn check_step_data(&self, data: &[&Sample]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Empty("task training data"));
        }
        if self.step >= self.tasks.len() {
            return Err(Error::InvalidArgument("all tasks already trained".into()));
        }
        let task = self.tasks.task(self.step);
        if let Some(s) = data.iter().find(|s| !task.class_ids.contains(&s.class_id)) {
            return Err(Error::InvalidArgument(format!(
                "sample {} of class {} is not in task {}",
                s.id, s.class_id, self.step
            )));
        }
        if let Some(s) = data.iter().find(|s| s.provenance != crate::data::Provenance::Natural) {
            return Err(Error::SyntheticInMemory(s.id));
        }
        Ok(())
    }

    fn train_step(&mut self, data: &[&Sample], style: Option<&StyleTransferModel>) -> Result<StepReport> {
        self.check_step_data(data)?;
        let mode = self.config.mode;
        if mode.is_debiased() && style.is_none() {
            return Err(Error::InvalidArgument(format!("mode {mode} needs a trained style model")));
        }
        if self.step > 0 && mode.uses_exemplars() && self.memory.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let t = self.step;
        let task = self.tasks.task(t).clone();
        let expected = self.tasks.seen_classes(t) - task.num_classes();
        if self.model.num_classes() != expected {
            return Err(Error::InvalidArgument(format!(
                "model has {} classes but {expected} are expected before step {t}",
                self.model.num_classes()
            )));
        }
        self.model
            .extend_classifier(task.num_classes(), &mut substream(self.seed, "head-init", t as u64))?;

        let sched = &self.config.schedule;
        let epochs = if t == 0 { sched.base_epochs } else { sched.incremental_epochs };
        let base_lr = if t == 0 { sched.base_lr } else { sched.incremental_lr };
        let per_epoch = data.len().div_ceil(sched.batch_size);
        let total_iters = epochs * per_epoch;
        let lambda = self.lambda();
        let mut opt = SgdMomentum::new(sched.momentum, sched.weight_decay).with_max_grad_norm(sched.max_grad_norm);
        let mut report = StepReport {
            step: t,
            first_total: f64::NAN,
            epochs: Vec::with_capacity(epochs),
        };
        let mut iteration = 0;
        for epoch in 0..epochs {
            let batches = self.epoch_batches(data, epoch, style)?;
            let mut sum = LossBreakdown::default();
            let mut style_classes = BTreeSet::new();
            let mut lr = base_lr;
            for batch in &batches {
                style_classes.extend(batch.style_classes.iter().copied());
                let natural = images_to_tensor(&batch.natural, &Device::Cpu)?;
                let conflict = batch
                    .conflict
                    .as_ref()
                    .map(|c| images_to_tensor(c, &Device::Cpu))
                    .transpose()?;
                let replay_t = batch
                    .replay
                    .as_ref()
                    .map(|r| -> Result<_> {
                        let n = images_to_tensor(&r.natural, &Device::Cpu)?;
                        let c = r.conflict.as_ref().map(|c| images_to_tensor(c, &Device::Cpu)).transpose()?;
                        Ok((n, c))
                    })
                    .transpose()?;
                self.instruments.conflict_images_generated += batch.conflict.as_ref().map_or(0, Vec::len);
                if let Some(r) = &batch.replay {
                    self.instruments.replay_natural_rows += r.natural.len();
                    self.instruments.replay_conflict_rows += r.conflict.as_ref().map_or(0, Vec::len);
                }
                let inputs = LossInputs {
                    natural: &natural,
                    labels: &batch.labels,
                    conflict: conflict.as_ref(),
                    replay: batch.replay.as_ref().zip(replay_t.as_ref()).map(|(r, (n, c))| ReplayInputs {
                        natural: n,
                        labels: &r.labels,
                        conflict: c.as_ref(),
                    }),
                };
                let (loss, parts) = compute_losses(
                    &self.model,
                    self.old_model.as_ref(),
                    &inputs,
                    &self.config.weights,
                    lambda,
                    mode,
                )?;
                if iteration == 0 {
                    report.first_total = parts.total;
                }
                lr = sched.lr_at(base_lr, iteration, total_iters, sched.warmup_epochs * per_epoch);
                let grads = loss.backward()?;
                opt.step(self.model.params(), &grads, lr)?;
                iteration += 1;
                sum.ce += parts.ce;
                sum.kd += parts.kd;
                sum.replay_ce += parts.replay_ce;
                sum.replay_kd += parts.replay_kd;
                sum.std += parts.std;
                sum.total += parts.total;
            }
            if mode.is_debiased() {
                self.instruments.style_epochs.push(StyleEpochRecord {
                    step: t,
                    epoch,
                    distinct_classes: style_classes.len(),
                });
            }
            let n = batches.len().max(1) as f64;
            let row = TrainLogRow {
                step: t,
                epoch,
                iterations: batches.len(),
                ce: sum.ce / n,
                kd: sum.kd / n,
                replay_ce: sum.replay_ce / n,
                replay_kd: sum.replay_kd / n,
                std: sum.std / n,
                total: sum.total / n,
                lambda,
                lr,
            };
            report.epochs.push(row.clone());
            self.log.push(row);
        }

        if mode.uses_exemplars() {
            self.memory.update(&task, &self.model, data)?;
        }
        self.old_model = Some(self.model.snapshot()?);
        self.step += 1;
        Ok(report)
    }

    /// All iteration batches of `epoch` at the current step, fully determined
    /// by `(seed, step, epoch)`.
    pub fn epoch_batches(
        &self,
        data: &[&Sample],
        epoch: usize,
        style: Option<&StyleTransferModel>,
    ) -> Result<Vec<IterationBatch>> {
        let t = self.step;
        let key = ((t as u64) << 32) | epoch as u64;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut substream(self.seed, "batch-order", key));
        let bsz = self.config.schedule.batch_size;
        order
            .chunks(bsz)
            .enumerate()
            .map(|(i, idx)| self.prepare_iteration(data, idx, (key << 16) | i as u64, style))
            .collect()
    }

    fn prepare_iteration(
        &self,
        data: &[&Sample],
        idx: &[usize],
        iter_key: u64,
        style: Option<&StyleTransferModel>,
    ) -> Result<IterationBatch> {
        let cfg = &self.config;
        let mode = cfg.mode;
        let t = self.step;
        let labels = idx
            .iter()
            .map(|&i| self.column(data[i].class_id))
            .collect::<Result<Vec<_>>>()?;
        let natural: Vec<Image> = if mode == TrainingMode::B1Augment {
            let mut rng = substream(self.seed, "b1-augment", iter_key);
            idx.iter().map(|&i| distort_style(&data[i].image, &cfg.b1, &mut rng)).collect()
        } else {
            idx.iter().map(|&i| data[i].image.clone()).collect()
        };

        let replay_samples: Option<Vec<&Sample>> = if t > 0 && mode.uses_exemplars() {
            let mut rng = substream(self.seed, "replay", iter_key);
            Some(self.memory.sample_batch(cfg.schedule.replay_k(), &mut rng)?)
        } else {
            None
        };

        let mut conflict = None;
        let mut style_classes = Vec::new();
        let mut replay_conflict = None;
        if mode.is_debiased() {
            let model = style.ok_or(Error::UntrainedDecoder)?;
            let styles: Vec<&Sample> = match (cfg.effective_style_source(t), &replay_samples) {
                (StyleSource::Exemplars, Some(r)) => (0..idx.len()).map(|i| r[i % r.len()]).collect(),
                _ => {
                    let mut rng = substream(self.seed, "style-pick", iter_key);
                    (0..idx.len()).map(|_| data[rng.random_range(0..data.len())]).collect()
                }
            };
            style_classes = styles.iter().map(|s| s.class_id).collect();
            let contents: Vec<&Image> = idx.iter().map(|&i| &data[i].image).collect();
            let style_imgs: Vec<&Image> = styles.iter().map(|s| &s.image).collect();
            let mut rng = substream(self.seed, "style-distort", iter_key);
            let batch = generate_conflict_batch(&contents, &style_imgs, model, &cfg.distortion, &mut rng)?;
            conflict = Some(batch.images);

            if cfg.debias_replay {
                if let Some(r) = &replay_samples {
                    let rc: Vec<&Image> = r.iter().map(|s| &s.image).collect();
                    let rs: Vec<&Image> = (0..rc.len()).map(|i| style_imgs[i % style_imgs.len()]).collect();
                    let mut rng = substream(self.seed, "replay-distort", iter_key);
                    replay_conflict =
                        Some(generate_conflict_batch(&rc, &rs, model, &cfg.distortion, &mut rng)?.images);
                }
            }
        }

        let replay = replay_samples
            .map(|r| -> Result<ReplayBatch> {
                Ok(ReplayBatch {
                    labels: r.iter().map(|s| self.column(s.class_id)).collect::<Result<_>>()?,
                    natural: r.iter().map(|s| s.image.clone()).collect(),
                    conflict: replay_conflict,
                })
            })
            .transpose()?;
        Ok(IterationBatch {
            natural,
            labels,
            conflict,
            style_classes,
            replay,
        })
    }

    /// Writes `model.safetensors`, `old_model.safetensors` and `state.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.save(&dir.join("model.safetensors"))?;
        if let Some(old) = &self.old_model {
            old.save(&dir.join("old_model.safetensors"))?;
        }
        let meta = StateMeta {
            step: self.step,
            seed: self.seed,
            mode: self.config.mode,
            num_classes: self.model.num_classes(),
            config: self.config.clone(),
            backbone: self.model.config().clone(),
            task_classes: self.tasks.tasks().iter().map(|t| t.class_ids.clone()).collect(),
            instruments: self.instruments.clone(),
            log: self.log.clone(),
            memory: self.memory.to_sidecar(),
        };
        let path = dir.join("state.json");
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    /// Restores a state written by [`TrainerState::save`]; exemplars are
    /// re-resolved by sample id against `dataset`.
    pub fn load(dir: &Path, dataset: &crate::data::Dataset) -> Result<Self> {
        let path = dir.join("state.json");
        let json = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut meta: StateMeta = serde_json::from_str(&json)?;
        meta.config.mode = meta.mode;
        let model = IncrementalModel::load(&dir.join("model.safetensors"), meta.backbone.clone())?;
        if model.num_classes() != meta.num_classes {
            return Err(Error::Shape("checkpoint classifier width disagrees with its metadata".into()));
        }
        let old_path = dir.join("old_model.safetensors");
        let old_model = if old_path.exists() {
            Some(IncrementalModel::load(&old_path, meta.backbone)?.snapshot()?)
        } else {
            None
        };
        Ok(Self {
            step: meta.step,
            model,
            old_model,
            memory: ExemplarMemory::from_sidecar(&meta.memory, dataset)?,
            config: meta.config,
            tasks: TaskSequence::from_tasks(meta.task_classes)?,
            seed: meta.seed,
            instruments: meta.instruments,
            log: meta.log,
        })
    }
}
