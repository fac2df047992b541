//! Config-driven runs: dataset and protocol setup, style-model preparation,
//! training with per-step checkpoints, evaluation, artifacts and comparison.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{build_task_sequence, generate_synthetic, load_image_folder, Dataset, Sample, SyntheticConfig, TaskSequence};
use crate::error::{Error, Result};
use crate::eval::{
    corruption_cells, evaluate_step_accuracy, loss_landscape, stylized_proxy, CorruptionCell, CorruptionKind,
    LandscapeOptions, LandscapeProfile, MetricsReport, Predictor,
};
use crate::image::Image;
use crate::losses::cross_entropy;
use crate::model::{BackboneConfig, IncrementalModel};
use crate::plot::{line_chart, Series};
use crate::rng::substream;
use crate::style::{DecoderTraining, StyleModelConfig, StyleTransferModel};
use crate::trainer::{StyleEpochRecord, TrainerConfig, TrainerState, TrainingMode};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub mode: TrainingMode,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub style: StyleConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    #[default]
    Synthetic,
    /// `root/train/<class>/*`, `root/test/<class>/*` and optionally `root/styles/*`.
    Folder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    pub root: Option<PathBuf>,
    /// Side length images are resized to (folder source only).
    pub image_size: usize,
    pub synthetic: SyntheticConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DatasetSource::Synthetic,
            root: None,
            image_size: 16,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub num_classes: usize,
    /// Number of incremental steps after the base task.
    pub increments: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            increments: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleConfig {
    pub model: StyleModelConfig,
    pub decoder: DecoderTraining,
    /// Style-model checkpoint; `{seed}` is replaced by the run seed. Loaded if
    /// present, written after training otherwise. Defaults to the run directory.
    pub checkpoint: Option<String>,
}

impl Default for StyleConfig {
    fn default() -> Self {
        Self {
            model: StyleModelConfig::default(),
            decoder: DecoderTraining::default(),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub corruptions: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    /// Evaluate the stylized hold-out domain-shift proxy.
    pub domain_shift: bool,
    pub landscape: LandscapeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            corruptions: CorruptionKind::ALL.to_vec(),
            severities: vec![1, 2, 3, 4, 5],
            domain_shift: true,
            landscape: LandscapeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeConfig {
    pub enabled: bool,
    pub alphas: Vec<f64>,
    pub num_directions: usize,
    pub antithetic: bool,
    /// Base-task training samples the profiled loss is computed on.
    pub max_samples: usize,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            alphas: vec![-1.0, -0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0],
            num_directions: 5,
            antithetic: false,
            max_samples: 200,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir must not be empty".into()));
        }
        let p = &self.protocol;
        if p.num_classes < 2 {
            return Err(Error::Config("protocol.num_classes must be at least 2".into()));
        }
        let rest = p.num_classes - p.num_classes.div_ceil(2);
        if p.increments > rest || (p.increments > 0 && rest % p.increments != 0) {
            return Err(Error::Config(format!(
                "{rest} incremental classes cannot be split equally over {} steps",
                p.increments
            )));
        }
        match self.dataset.source {
            DatasetSource::Synthetic => {
                if self.dataset.synthetic.num_classes != p.num_classes {
                    return Err(Error::Config(format!(
                        "dataset.synthetic.num_classes ({}) differs from protocol.num_classes ({})",
                        self.dataset.synthetic.num_classes, p.num_classes
                    )));
                }
            }
            DatasetSource::Folder => {
                if self.dataset.root.is_none() {
                    return Err(Error::Config("dataset.root is required for folder datasets".into()));
                }
                if self.dataset.image_size < 8 {
                    return Err(Error::Config("dataset.image_size must be at least 8".into()));
                }
            }
        }
        let mut trainer = self.trainer.clone();
        trainer.mode = self.mode;
        trainer.validate()?;
        if self.eval.corruptions.is_empty() || self.eval.severities.is_empty() {
            return Err(Error::Config("eval needs at least one corruption kind and severity".into()));
        }
        if self.eval.severities.iter().any(|s| !(1..=5).contains(s)) {
            return Err(Error::Config("eval.severities must lie in 1..=5".into()));
        }
        let l = &self.eval.landscape;
        if l.enabled {
            if !l.alphas.contains(&0.0) || l.alphas.iter().any(|a| !a.is_finite()) {
                return Err(Error::Config("eval.landscape.alphas must be finite and include 0".into()));
            }
            if l.num_directions == 0 || (l.antithetic && l.num_directions % 2 != 0) || l.max_samples == 0 {
                return Err(Error::Config(
                    "eval.landscape needs a positive (even when antithetic) direction count and max_samples".into(),
                ));
            }
        }
        let s = &self.style.model;
        if s.stages > 4 || s.width == 0 || !(0.0..=1.0).contains(&s.alpha) {
            return Err(Error::Config("style.model needs 0..=4 stages, positive width, alpha in [0, 1]".into()));
        }
        let side = match self.dataset.source {
            DatasetSource::Synthetic => self.dataset.synthetic.image_size,
            DatasetSource::Folder => self.dataset.image_size,
        };
        if side % (1 << s.stages) != 0 {
            return Err(Error::Config(format!(
                "image side {side} is not divisible by 2^{} style-encoder stages",
                s.stages
            )));
        }
        if self.style.decoder.steps == 0 && self.needs_style_model() {
            return Err(Error::Config("style.decoder.steps must be positive".into()));
        }
        Ok(())
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        let mut t = self.trainer.clone();
        t.mode = self.mode;
        t
    }

    pub fn needs_style_model(&self) -> bool {
        self.mode.is_debiased() || self.eval.domain_shift
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(self.mode.as_str()).join(format!("seed-{seed}"))
    }

    fn style_checkpoint(&self, seed: u64, run_dir: &Path) -> PathBuf {
        match &self.style.checkpoint {
            Some(t) => PathBuf::from(t.replace("{seed}", &seed.to_string())),
            None => run_dir.join("style.safetensors"),
        }
    }
}

pub fn load_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    let ds = match cfg.dataset.source {
        DatasetSource::Synthetic => generate_synthetic(&cfg.dataset.synthetic, seed)?,
        DatasetSource::Folder => {
            let root = cfg.dataset.root.as_ref().expect("validated");
            let size = cfg.dataset.image_size;
            let (names, train) = load_image_folder(&root.join("train"), size, None, 0)?;
            let (_, test) = load_image_folder(&root.join("test"), size, Some(&names), 1 << 32)?;
            let styles_dir = root.join("styles");
            let holdout_styles = if styles_dir.is_dir() {
                crate::data::load_style_folder(&styles_dir, size)?
            } else {
                Vec::new()
            };
            Dataset {
                class_names: names,
                train,
                test,
                holdout_styles,
            }
        }
    };
    if ds.num_classes() != cfg.protocol.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but protocol.num_classes is {}",
            ds.num_classes(),
            cfg.protocol.num_classes
        )));
    }
    Ok(ds)
}

/// Load the cached style model for `seed` or train one on base-task images.
pub fn prepare_style_model(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    tasks: &TaskSequence,
    seed: u64,
    run_dir: &Path,
) -> Result<StyleTransferModel> {
    let path = cfg.style_checkpoint(seed, run_dir);
    let mut rng = substream(seed, "style/decoder", 0);
    let fresh = StyleTransferModel::new(cfg.style.model.clone(), seed, &mut rng)?;
    if path.exists() {
        let cached = StyleTransferModel::load(&path)?;
        if cached.is_trained() && cached.encoder_id() == fresh.encoder_id() && cached.config() == fresh.config() {
            return Ok(cached);
        }
    }
    let mut model = fresh;
    let base: Vec<&Image> = dataset.train_for(&tasks.task(0).class_ids).map(|s| &s.image).collect();
    model.train_decoder(&base, &cfg.style.decoder, &mut rng)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    model.save(&path)?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub seen_classes: usize,
    pub acc: f64,
    pub base_task_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub split: String,
    pub step: usize,
    pub kind: String,
    pub severity: u8,
    pub sample_id: u64,
    pub label: usize,
    pub prediction: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub dataset: String,
    pub num_classes: usize,
    pub increments: usize,
    pub tasks: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: TrainingMode,
    pub seed: u64,
    pub protocol: Protocol,
    pub metrics: MetricsReport,
    pub steps: Vec<StepMetrics>,
    pub rc_cells: Vec<CorruptionCell>,
    pub domain_shift_is_proxy: bool,
    pub memory_reads: usize,
    pub replay_conflict_rows: usize,
    pub replay_natural_rows: usize,
    pub conflict_images_generated: usize,
    pub style_epochs: Vec<StyleEpochRecord>,
    pub reconstruction_bound: Option<f32>,
    pub landscape: Option<LandscapeProfile>,
}

impl RunReport {
    /// Largest number of distinct style-source classes in any epoch of step `t`.
    pub fn style_classes_at(&self, step: usize) -> Vec<usize> {
        self.style_epochs
            .iter()
            .filter(|r| r.step == step)
            .map(|r| r.distinct_classes)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunKind {
    /// Discard earlier checkpoints and train from scratch.
    Fresh,
    /// Continue from the latest checkpoint if there is one.
    Resume,
    /// Re-evaluate a completed run without training.
    EvalOnly,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct StepEvals {
    steps: Vec<StepMetrics>,
    predictions: Vec<Prediction>,
}

fn latest_checkpoint(run_dir: &Path) -> Option<(usize, PathBuf)> {
    let entries = std::fs::read_dir(run_dir.join("checkpoints")).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let step = name.strip_prefix("step-")?.parse::<usize>().ok()?;
            e.path().join("state.json").exists().then(|| (step, e.path()))
        })
        .max_by_key(|(s, _)| *s)
}

fn labels_for(tasks: &TaskSequence, samples: &[&Sample]) -> Vec<usize> {
    samples
        .iter()
        .map(|s| tasks.column_of(s.class_id).expect("sample class belongs to the protocol"))
        .collect()
}

fn predictions(
    split: &str,
    step: usize,
    kind: &str,
    severity: u8,
    samples: &[&Sample],
    labels: &[usize],
    pred: &[usize],
) -> Vec<Prediction> {
    samples
        .iter()
        .zip(labels)
        .zip(pred)
        .map(|((s, &label), &prediction)| Prediction {
            split: split.into(),
            step,
            kind: kind.into(),
            severity,
            sample_id: s.id,
            label,
            prediction,
        })
        .collect()
}

fn accuracy_of(labels: &[usize], pred: &[usize]) -> f64 {
    100.0 * labels.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

fn evaluate_step(
    model: &IncrementalModel,
    dataset: &Dataset,
    tasks: &TaskSequence,
    step: usize,
    evals: &mut StepEvals,
) -> Result<()> {
    let seen = tasks.seen_class_ids(step);
    let test: Vec<&Sample> = dataset.test_for(&seen).collect();
    if test.is_empty() {
        return Err(Error::Empty("test set for seen classes"));
    }
    let labels = labels_for(tasks, &test);
    let images: Vec<&Image> = test.iter().map(|s| &s.image).collect();
    let pred = model.predict(&images)?;
    let base: BTreeSet<usize> = tasks.task(0).class_ids.iter().copied().collect();
    let (bl, bp): (Vec<usize>, Vec<usize>) = test
        .iter()
        .zip(labels.iter().zip(&pred))
        .filter(|(s, _)| base.contains(&s.class_id))
        .map(|(_, (&l, &p))| (l, p))
        .unzip();
    evals.steps.retain(|r| r.step != step);
    evals.predictions.retain(|p| !(p.split == "clean" && p.step == step));
    evals.steps.push(StepMetrics {
        step,
        seen_classes: seen.len(),
        acc: accuracy_of(&labels, &pred),
        base_task_acc: accuracy_of(&bl, &bp),
    });
    evals.predictions.extend(predictions("clean", step, "", 0, &test, &labels, &pred));
    Ok(())
}

/// Mean cross-entropy of `model` on (a deterministic subset of) the base-task training data.
pub fn base_task_loss_fn<'a>(
    model: &'a IncrementalModel,
    dataset: &'a Dataset,
    tasks: &'a TaskSequence,
    max_samples: usize,
    seed: u64,
) -> impl FnMut() -> Result<f64> + 'a {
    use rand::seq::SliceRandom;
    let mut base: Vec<&Sample> = dataset.train_for(&tasks.task(0).class_ids).collect();
    base.shuffle(&mut substream(seed, "landscape/samples", 0));
    base.truncate(max_samples);
    let labels = labels_for(tasks, &base);
    let images: Vec<&Image> = base.iter().map(|s| &s.image).collect();
    move || {
        let logits = model.logits_for(&images)?;
        let loss = cross_entropy(&logits, &labels)?;
        Ok(loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
    }
}

pub fn landscape_for(
    cfg: &ExperimentConfig,
    model: &IncrementalModel,
    dataset: &Dataset,
    tasks: &TaskSequence,
    seed: u64,
) -> Result<LandscapeProfile> {
    let l = &cfg.eval.landscape;
    let loss = base_task_loss_fn(model, dataset, tasks, l.max_samples, seed);
    let opts = LandscapeOptions {
        num_directions: l.num_directions,
        antithetic: l.antithetic,
    };
    loss_landscape(model.params(), loss, &l.alphas, &opts, &mut substream(seed, "landscape/directions", 0))
}

/// Train (or resume) one seed and write every artifact into `run_dir`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, run_dir: &Path, kind: RunKind) -> Result<RunReport> {
    cfg.validate()?;
    let dataset = load_dataset(cfg, seed)?;
    let tasks = build_task_sequence(cfg.protocol.num_classes, cfg.protocol.increments, seed)?;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let ckpt_root = run_dir.join("checkpoints");

    let resumed = match kind {
        RunKind::Fresh => {
            if ckpt_root.exists() {
                std::fs::remove_dir_all(&ckpt_root).map_err(|e| Error::io(&ckpt_root, e))?;
            }
            None
        }
        RunKind::Resume | RunKind::EvalOnly => latest_checkpoint(run_dir),
    };
    let (mut state, mut evals) = match resumed {
        Some((_, dir)) => {
            let state = TrainerState::load(&dir, &dataset)?;
            if state.mode() != cfg.mode || state.seed != seed || state.tasks.tasks() != tasks.tasks() {
                return Err(Error::ProtocolMismatch(format!(
                    "checkpoint {} was written by a different mode, seed or protocol",
                    dir.display()
                )));
            }
            let path = dir.join("eval.json");
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            (state, serde_json::from_str::<StepEvals>(&text)?)
        }
        None => {
            if kind == RunKind::EvalOnly {
                return Err(Error::InvalidArgument(format!("no checkpoints under {}", run_dir.display())));
            }
            (
                TrainerState::new(cfg.trainer_config(), cfg.backbone.clone(), tasks.clone(), seed)?,
                StepEvals::default(),
            )
        }
    };
    if kind == RunKind::EvalOnly && state.step < tasks.len() {
        return Err(Error::InvalidArgument(format!(
            "run under {} stopped after {} of {} steps; resume it first",
            run_dir.display(),
            state.step,
            tasks.len()
        )));
    }

    let style = if cfg.needs_style_model() {
        Some(prepare_style_model(cfg, &dataset, &tasks, seed, run_dir)?)
    } else {
        None
    };

    while state.step < tasks.len() {
        let t = state.step;
        let data: Vec<&Sample> = dataset.train_for(&tasks.task(t).class_ids).collect();
        let style_ref = if cfg.mode.is_debiased() { style.as_ref() } else { None };
        if t == 0 {
            state.train_base_task(&data, style_ref)?;
        } else {
            state.train_incremental_step(&data, style_ref)?;
        }
        evaluate_step(&state.model, &dataset, &tasks, t, &mut evals)?;
        let dir = ckpt_root.join(format!("step-{t}"));
        state.save(&dir)?;
        let path = dir.join("eval.json");
        std::fs::write(&path, serde_json::to_string(&evals)?).map_err(|e| Error::io(&path, e))?;
    }

    // final-model robustness
    let all = tasks.seen_class_ids(tasks.len() - 1);
    let test: Vec<&Sample> = dataset.test_for(&all).collect();
    let labels = labels_for(&tasks, &test);
    let images: Vec<&Image> = test.iter().map(|s| &s.image).collect();
    let final_step = tasks.len() - 1;
    let mut preds: Vec<Prediction> = evals.predictions.clone();
    let mut cells = Vec::new();
    for &k in &cfg.eval.corruptions {
        for &s in &cfg.eval.severities {
            let cell = corruption_cells(&state.model, &images, &labels, &[k], &[s], seed)?;
            // rebuild the same corrupted set to log per-sample predictions
            let spec = crate::eval::CorruptionSpec::new(k, s)?;
            let corrupted = crate::eval::corrupt_dataset(&images, &spec, &mut substream(seed, k.as_str(), s as u64));
            let refs: Vec<&Image> = corrupted.iter().collect();
            let pred = state.model.predict(&refs)?;
            debug_assert_eq!(100.0 - accuracy_of(&labels, &pred), cell[0].error);
            preds.extend(predictions("corrupt", final_step, k.as_str(), s, &test, &labels, &pred));
            cells.extend(cell);
        }
    }
    let domain_shift_acc = match (&style, cfg.eval.domain_shift) {
        (Some(sm), true) if !dataset.holdout_styles.is_empty() => {
            let proxy = stylized_proxy(&images, &dataset.holdout_styles, sm, &mut substream(seed, "proxy", 0))?;
            let refs: Vec<&Image> = proxy.iter().collect();
            let pred = state.model.predict(&refs)?;
            preds.extend(predictions("proxy", final_step, "", 0, &test, &labels, &pred));
            Some(evaluate_step_accuracy(&state.model, &refs, &labels)?)
        }
        _ => None,
    };
    let landscape = if cfg.eval.landscape.enabled {
        Some(landscape_for(cfg, &state.model, &dataset, &tasks, seed)?)
    } else {
        None
    };

    evals.steps.sort_by_key(|r| r.step);
    let metrics = MetricsReport::from_parts(
        evals.steps.iter().map(|r| r.acc).collect(),
        evals.steps.iter().map(|r| r.base_task_acc).collect(),
        &cells,
        domain_shift_acc,
    )?;
    let report = RunReport {
        mode: cfg.mode,
        seed,
        protocol: Protocol {
            dataset: match cfg.dataset.source {
                DatasetSource::Synthetic => "synthetic".into(),
                DatasetSource::Folder => format!("folder:{}", cfg.dataset.root.as_ref().expect("validated").display()),
            },
            num_classes: cfg.protocol.num_classes,
            increments: cfg.protocol.increments,
            tasks: tasks.tasks().iter().map(|t| t.class_ids.clone()).collect(),
        },
        metrics,
        steps: evals.steps.clone(),
        rc_cells: cells,
        domain_shift_is_proxy: true,
        memory_reads: state.memory.access_count(),
        replay_conflict_rows: state.instruments.replay_conflict_rows,
        replay_natural_rows: state.instruments.replay_natural_rows,
        conflict_images_generated: state.instruments.conflict_images_generated,
        style_epochs: state.instruments.style_epochs.clone(),
        reconstruction_bound: style.as_ref().and_then(|s| s.reconstruction_bound()),
        landscape,
    };
    write_artifacts(run_dir, &report, &state, &preds)?;
    Ok(report)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct CellRow {
    kind: String,
    severity: u8,
    error: f64,
}

#[derive(Serialize)]
struct LandscapeRow {
    alpha: f64,
    direction_id: usize,
    loss: f64,
}

fn write_artifacts(dir: &Path, report: &RunReport, state: &TrainerState, preds: &[Prediction]) -> Result<()> {
    write_csv(&dir.join("metrics.csv"), &report.steps)?;
    let cells: Vec<CellRow> = report
        .rc_cells
        .iter()
        .map(|c| CellRow {
            kind: c.kind.as_str().into(),
            severity: c.severity,
            error: c.error,
        })
        .collect();
    write_csv(&dir.join("rc_cells.csv"), &cells)?;
    write_csv(&dir.join("train_log.csv"), &state.log)?;
    write_csv(&dir.join("eval_predictions.csv"), preds)?;
    let acc_points: Vec<(f64, f64)> = report.steps.iter().map(|r| (r.step as f64, r.acc)).collect();
    let base_points: Vec<(f64, f64)> = report.steps.iter().map(|r| (r.step as f64, r.base_task_acc)).collect();
    let svg = line_chart(
        &format!("{} seed {}", report.mode, report.seed),
        "step",
        "top-1 accuracy (%)",
        &[
            Series { name: "seen classes", points: acc_points },
            Series { name: "base task", points: base_points },
        ],
    );
    let path = dir.join("accuracy.svg");
    std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    if let Some(l) = &report.landscape {
        write_landscape(dir, l, &format!("{} seed {}", report.mode, report.seed))?;
    }
    let path = dir.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&path, e))
}

pub fn write_landscape(dir: &Path, profile: &LandscapeProfile, title: &str) -> Result<()> {
    let rows: Vec<LandscapeRow> = profile
        .losses
        .iter()
        .enumerate()
        .flat_map(|(d, row)| {
            profile.alphas.iter().zip(row).map(move |(&alpha, &loss)| LandscapeRow {
                alpha,
                direction_id: d,
                loss,
            })
        })
        .collect();
    write_csv(&dir.join("landscape.csv"), &rows)?;
    let svg = line_chart(
        title,
        "alpha",
        "base-task loss",
        &[Series {
            name: "mean over directions",
            points: profile.alphas.iter().copied().zip(profile.mean_loss.iter().copied()).collect(),
        }],
    );
    let path = dir.join("landscape.svg");
    std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))
}

/// Command-line style overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub mode: Option<TrainingMode>,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn with_overrides(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = &o.seeds {
            self.seeds = s.clone();
        }
        if let Some(m) = o.mode {
            self.mode = m;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        self.validate()?;
        Ok(self)
    }
}

/// Run every seed of the config; per-seed artifacts go under `run_dir(seed)`.
pub fn run_experiment(cfg: &ExperimentConfig, kind: RunKind) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    let reports = cfg
        .seeds
        .iter()
        .map(|&seed| run_seed(cfg, seed, &cfg.run_dir(seed), kind))
        .collect::<Result<Vec<_>>>()?;
    let dir = cfg.output_dir.join(cfg.mode.as_str());
    let path = dir.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&reports)?).map_err(|e| Error::io(&path, e))?;
    Ok(reports)
}

/// Read every `seed-*/report.json` under a mode directory (or a single report file).
pub fn load_reports(path: &Path) -> Result<Vec<RunReport>> {
    let read = |p: &Path| -> Result<RunReport> {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        Ok(serde_json::from_str(&text)?)
    };
    if path.is_file() {
        return Ok(vec![read(path)?]);
    }
    let mut reports = Vec::new();
    for e in std::fs::read_dir(path).map_err(|e| Error::io(path, e))?.filter_map(|e| e.ok()) {
        let p = e.path().join("report.json");
        if p.exists() {
            reports.push(read(&p)?);
        }
    }
    if reports.is_empty() {
        return Err(Error::InvalidArgument(format!("no run reports under {}", path.display())));
    }
    reports.sort_by_key(|r| r.seed);
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedDelta {
    pub seed: u64,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `mean_b - mean_a`.
    pub delta: f64,
    pub per_seed: Vec<SeedDelta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub label_a: String,
    pub label_b: String,
    pub metrics: Vec<MetricDelta>,
}

impl Comparison {
    pub fn metric(&self, name: &str) -> Option<&MetricDelta> {
        self.metrics.iter().find(|m| m.metric == name)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<18} {:>12} {:>12} {:>10}\n",
            "metric", self.label_a, self.label_b, "delta"
        );
        for m in &self.metrics {
            out.push_str(&format!("{:<18} {:>12.3} {:>12.3} {:>+10.3}\n", m.metric, m.mean_a, m.mean_b, m.delta));
            for s in &m.per_seed {
                out.push_str(&format!(
                    "  seed {:<11} {:>12.3} {:>12.3} {:>+10.3}\n",
                    s.seed, s.a, s.b, s.delta
                ));
            }
        }
        out
    }
}

/// Side-by-side metrics of two sets of runs over the same protocol and seeds.
pub fn compare_runs(a: &[RunReport], b: &[RunReport]) -> Result<Comparison> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("report set"));
    }
    let seeds = |r: &[RunReport]| r.iter().map(|x| x.seed).collect::<BTreeSet<_>>();
    if seeds(a) != seeds(b) || seeds(a).len() != a.len() || seeds(b).len() != b.len() {
        return Err(Error::ProtocolMismatch("reports cover different seeds".into()));
    }
    for ra in a {
        let rb = b.iter().find(|r| r.seed == ra.seed).expect("same seeds");
        let (pa, pb) = (&ra.protocol, &rb.protocol);
        if pa.increments != pb.increments {
            return Err(Error::ProtocolMismatch(format!(
                "T differs: {} vs {} incremental steps",
                pa.increments, pb.increments
            )));
        }
        if pa != pb {
            return Err(Error::ProtocolMismatch(format!(
                "seed {} uses different datasets or class splits",
                ra.seed
            )));
        }
        if ra.rc_cells.len() != rb.rc_cells.len()
            || ra.rc_cells.iter().zip(&rb.rc_cells).any(|(x, y)| (x.kind, x.severity) != (y.kind, y.severity))
        {
            return Err(Error::ProtocolMismatch("corruption grids differ".into()));
        }
    }
    type Getter = fn(&RunReport) -> Option<f64>;
    let getters: [(&str, Getter); 5] = [
        ("avg_inc_acc", |r| Some(r.metrics.avg_inc_acc)),
        ("final_acc", |r| Some(r.metrics.final_acc)),
        ("forgetting", |r| Some(r.metrics.forgetting)),
        ("mce", |r| Some(r.metrics.mce)),
        ("domain_shift_acc", |r| r.metrics.domain_shift_acc),
    ];
    let mut metrics = Vec::new();
    for (name, get) in getters {
        let mut per_seed = Vec::new();
        for ra in a {
            let rb = b.iter().find(|r| r.seed == ra.seed).expect("same seeds");
            if let (Some(x), Some(y)) = (get(ra), get(rb)) {
                per_seed.push(SeedDelta { seed: ra.seed, a: x, b: y, delta: y - x });
            }
        }
        if per_seed.len() != a.len() {
            continue;
        }
        let n = per_seed.len() as f64;
        let mean_a = per_seed.iter().map(|s| s.a).sum::<f64>() / n;
        let mean_b = per_seed.iter().map(|s| s.b).sum::<f64>() / n;
        metrics.push(MetricDelta {
            metric: name.into(),
            mean_a,
            mean_b,
            delta: mean_b - mean_a,
            per_seed,
        });
    }
    Ok(Comparison {
        label_a: a[0].mode.as_str().into(),
        label_b: b[0].mode.as_str().into(),
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
output_dir = "out"
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.mode, TrainingMode::Standard);
        assert_eq!(cfg.protocol.num_classes, 20);
        assert_eq!(cfg.trainer.schedule.momentum, 0.9);
        assert_eq!(cfg.trainer.weights.gamma, 0.01);
        assert_eq!(cfg.eval.landscape.num_directions, 5);
        assert_eq!(cfg.run_dir(3), PathBuf::from("out/standard/seed-3"));
    }

    #[test]
    fn schema_errors_are_config_errors() {
        let cases = [
            "schema_version = 2\noutput_dir = \"o\"",
            "schema_version = 1\noutput_dir = \"o\"\nbogus = 1",
            "schema_version = 1\noutput_dir = \"o\"\nmode = \"fancy\"",
            "schema_version = 1\noutput_dir = \"o\"\nseeds = []",
            "schema_version = 1\noutput_dir = \"o\"\n[protocol]\nnum_classes = 20\nincrements = 3",
            "schema_version = 1\noutput_dir = \"o\"\n[trainer.weights]\ngamma = -1.0",
            "schema_version = 1\noutput_dir = \"o\"\n[trainer]\nmode = \"debiased\"",
            "schema_version = 1\noutput_dir = \"o\"\n[eval]\nseverities = [6]",
            "schema_version = 1\noutput_dir = \"o\"\n[dataset]\nsource = \"folder\"",
        ];
        for c in cases {
            let err = ExperimentConfig::from_toml_str(c).unwrap_err();
            assert!(err.is_config(), "{c}: {err}");
        }
    }

    fn report(seed: u64, increments: usize, acc: [f64; 3], mce: f64) -> RunReport {
        let cells = vec![CorruptionCell { kind: CorruptionKind::Contrast, severity: 1, error: mce }];
        RunReport {
            mode: TrainingMode::Standard,
            seed,
            protocol: Protocol {
                dataset: "synthetic".into(),
                num_classes: 20,
                increments,
                tasks: vec![],
            },
            metrics: MetricsReport::from_parts(acc.to_vec(), acc.to_vec(), &cells, None).unwrap(),
            steps: vec![],
            rc_cells: cells,
            domain_shift_is_proxy: true,
            memory_reads: 0,
            replay_conflict_rows: 0,
            replay_natural_rows: 0,
            conflict_images_generated: 0,
            style_epochs: vec![],
            reconstruction_bound: None,
            landscape: None,
        }
    }

    #[test]
    fn identical_reports_have_zero_deltas() {
        let a = vec![report(0, 2, [90.0, 80.0, 70.0], 30.0), report(1, 2, [88.0, 78.0, 66.0], 33.0)];
        let c = compare_runs(&a, &a).unwrap();
        assert!(c.metrics.iter().all(|m| m.delta == 0.0 && m.per_seed.iter().all(|s| s.delta == 0.0)));
    }

    #[test]
    fn known_deltas() {
        let a = vec![report(0, 2, [90.0, 80.0, 70.0], 30.0), report(1, 2, [90.0, 80.0, 60.0], 40.0)];
        let b = vec![report(0, 2, [90.0, 85.0, 76.0], 27.0), report(1, 2, [90.0, 82.0, 68.0], 35.0)];
        let c = compare_runs(&a, &b).unwrap();
        let mce = c.metric("mce").unwrap();
        assert_eq!(mce.delta, -4.0);
        assert_eq!(mce.per_seed[0].delta, -3.0);
        assert_eq!(mce.per_seed[1].delta, -5.0);
        let f = c.metric("forgetting").unwrap();
        assert_eq!((f.per_seed[0].delta, f.per_seed[1].delta), (-6.0, -8.0));
        assert_eq!(c.metric("final_acc").unwrap().delta, 7.0);
        assert!(c.metric("domain_shift_acc").is_none());
        assert!(c.to_table().contains("mce"));
    }

    #[test]
    fn mismatched_protocols_are_rejected() {
        let a = vec![report(0, 2, [90.0, 80.0, 70.0], 30.0)];
        let b = vec![report(0, 5, [90.0, 80.0, 70.0], 30.0)];
        assert!(matches!(compare_runs(&a, &b), Err(Error::ProtocolMismatch(_))));
        let c = vec![report(1, 2, [90.0, 80.0, 70.0], 30.0)];
        assert!(matches!(compare_runs(&a, &c), Err(Error::ProtocolMismatch(_))));
    }
}
