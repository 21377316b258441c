//! Pseudo-labeling, distillation and evaluation stages, and the run
//! orchestrator that chains them.
//!
//! Every stage writes its outputs under `<output_dir>/stages/<stage>-<key>`,
//! where the key hashes the stage name, its input hash and the run
//! configuration. A stage directory with a valid `done.json` is reused on
//! later runs. Output files are canonical JSON, so a run with fixed config
//! and seeds is reproducible byte for byte; wall-clock timestamps only
//! appear in `provenance.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::adapter::{AdapterEndpoint, AdapterError, Detector, ProcessDetector, ProcessTrainer, Role, Trainer};
use crate::augment::{AugmentationSet, AugmentationSpec, PredictionSet};
use crate::dataio::{self, DataError, DatasetManifest, LoadOptions};
use crate::eval::{evaluate, Detections, EvalError, EvalResult, IouKind};
use crate::fusion::{confidence_filter, fuse, select_top1, FusionConfig, FusionError};
use crate::geometry::{BoundsPolicy, DEFAULT_LABEL};
use crate::json::{sha256_hex, to_canonical_string};
use crate::synthdet::{self, NoiseModel, SceneConfig, SyntheticDetector, SyntheticStudent};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Adapter {
        stage: &'static str,
        #[source]
        source: AdapterError,
    },
    #[error("{stage}: {source}")]
    Data {
        stage: &'static str,
        #[source]
        source: DataError,
    },
    #[error("{stage}: {source}")]
    Fusion {
        stage: &'static str,
        #[source]
        source: FusionError,
    },
    #[error("{stage}: {source}")]
    Eval {
        stage: &'static str,
        #[source]
        source: EvalError,
    },
    #[error("{stage}: no labeled images left ({diagnostics})")]
    EmptyLabels { stage: &'static str, diagnostics: String },
    #[error("stage record {index} ({stage}) does not chain: input {got} != previous output {expected}")]
    Chain {
        index: usize,
        stage: String,
        expected: String,
        got: String,
    },
}

impl PipelineError {
    /// Process exit code: 1 config, 2 adapter, 3 data.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Adapter { .. } => 2,
            _ => 3,
        }
    }

    fn adapter(stage: &'static str) -> impl Fn(AdapterError) -> Self {
        move |source| match source {
            AdapterError::Schema(source) => PipelineError::Data { stage, source },
            source => PipelineError::Adapter { stage, source },
        }
    }

    fn data(stage: &'static str) -> impl Fn(DataError) -> Self {
        move |source| PipelineError::Data { stage, source }
    }
}

/// Confidence thresholds used for the public spacecraft datasets.
pub fn dataset_threshold(name: &str) -> Option<f64> {
    match name.to_ascii_lowercase().as_str() {
        "spark-2024" | "spark" | "tango" => Some(0.5),
        "speed+" | "speedplus" => Some(0.6),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    /// COCO annotation file with ground truth for every image.
    Coco {
        path: PathBuf,
        #[serde(default)]
        bounds: BoundsPolicy,
    },
    /// Generated scenes; ground truth doubles as the synthetic detectors'
    /// hidden truth.
    Synthetic {
        images: usize,
        seed: u64,
        #[serde(default)]
        scene: SceneConfig,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelabelConfig {
    /// Relabel the train split with each trained student and retrain.
    pub enabled: bool,
    /// Apply the confidence threshold to student relabels.
    pub filter: bool,
    /// Run the student under the full augmentation set when relabeling.
    pub tta: bool,
}

impl Default for RelabelConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            filter: true,
            tta: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandConfig {
    pub command: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    600
}

impl CommandConfig {
    fn endpoint(&self, role: Role) -> Result<AdapterEndpoint, PipelineError> {
        AdapterEndpoint::new(self.command.clone(), role, self.timeout_secs)
            .map_err(|e| PipelineError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TeacherConfig {
    Process { predict: CommandConfig },
    Synthetic {
        #[serde(default)]
        noise: NoiseModel,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum StudentConfig {
    Process { train: CommandConfig, predict: CommandConfig },
    Synthetic {
        #[serde(default = "student_noise")]
        noise: NoiseModel,
        seed: u64,
    },
}

/// Raw detector of the default synthetic student: half the teacher's
/// jitter, no misses or clutter, and a systematic offset its fit removes.
pub fn student_noise() -> NoiseModel {
    NoiseModel {
        jitter_sigma: 0.01,
        miss_rate: 0.0,
        clutter_rate: 0.0,
        score_sigma: 0.05,
        bias: [0.03, -0.02, 0.03, -0.02],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    pub split: SplitConfig,
    #[serde(default)]
    pub augmentations: AugmentationSet,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default = "yes")]
    pub top1: bool,
    #[serde(default = "one")]
    pub distill_iterations: u32,
    #[serde(default)]
    pub relabel: RelabelConfig,
    #[serde(default = "default_prompt")]
    pub prompt: String,
    /// Also score the teacher's fused pseudo-labels on the eval split.
    #[serde(default)]
    pub evaluate_teacher: bool,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
}

fn yes() -> bool {
    true
}

fn one() -> u32 {
    1
}

fn default_prompt() -> String {
    DEFAULT_LABEL.to_string()
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config; a relative `output_dir` or dataset path is
    /// resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.output_dir = base.join(&cfg.output_dir);
        if let DatasetSource::Coco { path, .. } = &mut cfg.dataset {
            *path = base.join(&*path);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.distill_iterations < 1 {
            return bad("distill_iterations must be at least 1".into());
        }
        self.fusion.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if let TeacherConfig::Synthetic { noise, .. } = &self.teacher {
            noise.validate().map_err(|e| PipelineError::Config(format!("teacher: {e}")))?;
        }
        match &self.student {
            StudentConfig::Synthetic { noise, .. } => {
                noise.validate().map_err(|e| PipelineError::Config(format!("student: {e}")))?;
            }
            StudentConfig::Process { train, predict } => {
                train.endpoint(Role::Train)?;
                predict.endpoint(Role::Predict)?;
            }
        }
        if let TeacherConfig::Process { predict } = &self.teacher {
            predict.endpoint(Role::Predict)?;
        }
        if let DatasetSource::Synthetic { images, .. } = self.dataset {
            if self.split.train_size >= images {
                return bad(format!(
                    "train_size {} must be smaller than the dataset ({images} images)",
                    self.split.train_size
                ));
            }
        }
        Ok(())
    }

    /// Hash of everything except the output location.
    pub fn content_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("config is an object").remove("output_dir");
        sha256_hex(to_canonical_string(&v).as_bytes())
    }
}

/// Provenance of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub input_hash: String,
    pub output_hash: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub kept: usize,
    pub dropped: usize,
    pub cached: bool,
    pub warnings: Vec<String>,
}

/// Checks that each record's input is the previous record's output.
pub fn validate_chain(records: &[StageRecord]) -> Result<(), PipelineError> {
    for (i, w) in records.windows(2).enumerate() {
        if w[1].input_hash != w[0].output_hash {
            return Err(PipelineError::Chain {
                index: i + 1,
                stage: w[1].stage.clone(),
                expected: w[0].output_hash.clone(),
                got: w[1].input_hash.clone(),
            });
        }
    }
    Ok(())
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// How a detector's per-view output is reduced to labels.
#[derive(Debug, Clone)]
pub struct LabelingRule<'a> {
    pub views: &'a [AugmentationSpec],
    pub fusion: &'a FusionConfig,
    pub filter: bool,
    pub top1: bool,
}

/// Labels produced for a set of images.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeling {
    /// Kept images with their surviving instances.
    pub labeled: DatasetManifest,
    /// Fused (and, if enabled, filtered) instances per input image, including
    /// images left empty.
    pub per_image: Detections,
    pub dropped: Vec<u64>,
}

/// Runs `detector` under every view, maps predictions back to the original
/// frame, fuses per image, filters at theta and keeps the top instance.
pub fn label_images(
    detector: &dyn Detector,
    images: &DatasetManifest,
    rule: &LabelingRule,
    artifact: Option<&Path>,
    workdir: &Path,
    provenance: &str,
) -> Result<Labeling, AdapterError> {
    let per_view: Vec<Vec<PredictionSet>> = rule
        .views
        .par_iter()
        .map(|view| {
            let dir = workdir.join(format!("view-{}", view.token().replace(':', "_")));
            let sets = detector.predict(images, *view, artifact, &dir)?;
            Ok(sets.into_iter().map(|s| s.inverse_mapped()).collect())
        })
        .collect::<Result<_, AdapterError>>()?;

    let ids: Vec<u64> = images.image_ids().collect();
    let per_image: Vec<(u64, Vec<crate::geometry::Instance>)> = ids
        .par_iter()
        .enumerate()
        .map(|(k, id)| {
            let sets: Vec<PredictionSet> = per_view.iter().map(|v| v[k].clone()).collect();
            debug_assert!(sets.iter().all(|s| s.image_id == *id));
            let fused = fuse(&sets, rule.fusion).map_err(|e| AdapterError::InProcess(format!("image {id}: {e}")))?;
            let mut kept = if rule.filter {
                confidence_filter(fused, rule.fusion.score_threshold)
            } else {
                fused
            };
            if rule.top1 {
                kept = select_top1(&kept).into_iter().collect();
            }
            Ok((*id, kept))
        })
        .collect::<Result<_, AdapterError>>()?;

    let kept_ids: BTreeSet<u64> = per_image.iter().filter(|(_, v)| !v.is_empty()).map(|(id, _)| *id).collect();
    let dropped = ids.iter().copied().filter(|id| !kept_ids.contains(id)).collect();
    let mut labeled = images.subset(&kept_ids, provenance);
    for (id, insts) in &per_image {
        if !insts.is_empty() {
            labeled
                .set_annotations(*id, insts.clone())
                .map_err(AdapterError::Schema)?;
        }
    }
    Ok(Labeling {
        labeled,
        per_image: per_image.into_iter().collect(),
        dropped,
    })
}

/// Output of [`stage_pseudo_label`].
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub labeling: Labeling,
    pub warnings: Vec<String>,
}

pub fn stage_pseudo_label(
    cfg: &PipelineConfig,
    teacher: &dyn Detector,
    train: &DatasetManifest,
    workdir: &Path,
) -> Result<PseudoLabels, PipelineError> {
    let rule = LabelingRule {
        views: cfg.augmentations.views(),
        fusion: &cfg.fusion,
        filter: true,
        top1: cfg.top1,
    };
    let images = train.without_annotations("train");
    let labeling = label_images(teacher, &images, &rule, None, workdir, "pseudo_label")
        .map_err(PipelineError::adapter("pseudo_label"))?;
    let mut warnings = Vec::new();
    if labeling.labeled.is_empty() {
        warnings.push(format!(
            "no pseudo-label reached the confidence threshold {} on {} images",
            cfg.fusion.score_threshold,
            train.len()
        ));
    }
    for w in &warnings {
        log::warn!("pseudo_label: {w}");
    }
    Ok(PseudoLabels { labeling, warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    /// Labels the student of this iteration was trained on.
    pub labels: PathBuf,
    pub labeled_images: usize,
    pub artifact: PathBuf,
}

/// Output of [`stage_distill`].
#[derive(Debug, Clone, PartialEq)]
pub struct Distilled {
    pub artifact: PathBuf,
    pub iterations: Vec<IterationRecord>,
    pub final_labels: DatasetManifest,
}

/// Trains the student on `labeled`. With relabeling enabled, each of the
/// `distill_iterations` passes relabels the full train split with the
/// current student and retrains from scratch on the new labels, so the
/// returned artifact comes from training number `distill_iterations + 1`.
pub fn stage_distill(
    cfg: &PipelineConfig,
    trainer: &dyn Trainer,
    student: &dyn Detector,
    labeled: &DatasetManifest,
    train: &DatasetManifest,
    workdir: &Path,
) -> Result<Distilled, PipelineError> {
    const STAGE: &str = "distill";
    if labeled.labeled_count() == 0 {
        return Err(PipelineError::EmptyLabels {
            stage: STAGE,
            diagnostics: format!("pseudo-labeling kept 0 of {} train images", train.len()),
        });
    }
    let images = train.without_annotations("train");
    let train_ids: BTreeSet<u64> = images.image_ids().collect();
    let views = if cfg.relabel.tta {
        cfg.augmentations.views().to_vec()
    } else {
        vec![AugmentationSpec::Identity]
    };
    let rule = LabelingRule {
        views: &views,
        fusion: &cfg.fusion,
        filter: cfg.relabel.filter,
        top1: cfg.top1,
    };
    let passes = if cfg.relabel.enabled { cfg.distill_iterations } else { 0 };
    if !cfg.relabel.enabled && cfg.distill_iterations > 1 {
        log::warn!("relabeling disabled: distill_iterations > 1 has no effect");
    }

    let mut labels = labeled.clone();
    let mut iterations = Vec::new();
    for iteration in 1..=passes + 1 {
        let dir = workdir.join(format!("iter-{iteration}"));
        let labels_path = dir.join("labels.json");
        dataio::save_coco(&labels, &labels_path).map_err(PipelineError::data(STAGE))?;
        let artifact = trainer
            .train(&labels, iteration, &dir)
            .map_err(PipelineError::adapter(STAGE))?;
        if !artifact.exists() {
            return Err(PipelineError::Adapter {
                stage: STAGE,
                source: AdapterError::MissingArtifact(artifact),
            });
        }
        iterations.push(IterationRecord {
            iteration,
            labels: labels_path,
            labeled_images: labels.labeled_count(),
            artifact: artifact.clone(),
        });
        if iteration > passes {
            return Ok(Distilled {
                artifact,
                iterations,
                final_labels: labels,
            });
        }
        let relabeled = label_images(student, &images, &rule, Some(&artifact), &dir.join("relabel"), "relabel")
            .map_err(PipelineError::adapter(STAGE))?;
        debug_assert!(relabeled.labeled.image_ids().all(|id| train_ids.contains(&id)));
        if relabeled.labeled.is_empty() {
            return Err(PipelineError::EmptyLabels {
                stage: STAGE,
                diagnostics: format!(
                    "iteration {iteration}: the student relabeled 0 of {} train images (threshold {}, filter {})",
                    images.len(),
                    cfg.fusion.score_threshold,
                    cfg.relabel.filter
                ),
            });
        }
        labels = relabeled.labeled;
    }
    unreachable!("the loop returns on its last iteration")
}

/// Output of [`stage_infer_eval`].
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub predictions: Detections,
    pub boxes: EvalResult,
    pub masks: Option<EvalResult>,
    pub warnings: Vec<String>,
}

/// Box AP always; mask AP when every ground-truth and predicted instance
/// carries a mask.
pub fn evaluate_both(
    stage: &'static str,
    gt: &Detections,
    predictions: &Detections,
) -> Result<(EvalResult, Option<EvalResult>, Vec<String>), PipelineError> {
    let eval_err = |source| PipelineError::Eval { stage, source };
    let boxes = evaluate(gt, predictions, IouKind::Box).map_err(eval_err)?;
    let gt_masks = gt.values().flatten().all(|i| i.mask().is_some());
    let pred_masks = predictions.values().flatten().all(|i| i.mask().is_some());
    let mut warnings = Vec::new();
    let masks = if gt_masks && pred_masks {
        Some(evaluate(gt, predictions, IouKind::Mask).map_err(eval_err)?)
    } else {
        if gt_masks {
            warnings.push("predictions lack masks; mask AP skipped".to_string());
        }
        None
    };
    Ok((boxes, masks, warnings))
}

/// Single-view student inference on the eval split, scored against its
/// ground truth.
pub fn stage_infer_eval(
    cfg: &PipelineConfig,
    student: &dyn Detector,
    artifact: &Path,
    eval: &DatasetManifest,
    workdir: &Path,
) -> Result<Evaluation, PipelineError> {
    const STAGE: &str = "infer_eval";
    if !artifact.exists() {
        return Err(PipelineError::Adapter {
            stage: STAGE,
            source: AdapterError::MissingArtifact(artifact.to_path_buf()),
        });
    }
    let rule = LabelingRule {
        views: &[AugmentationSpec::Identity],
        fusion: &cfg.fusion,
        filter: false,
        top1: cfg.top1,
    };
    let images = eval.without_annotations("eval");
    let out = label_images(student, &images, &rule, Some(artifact), workdir, "student")
        .map_err(PipelineError::adapter(STAGE))?;
    let predictions: Detections = out.per_image.into_iter().filter(|(_, v)| !v.is_empty()).collect();
    let (boxes, masks, warnings) = evaluate_both(STAGE, &eval.ground_truth(), &predictions)?;
    Ok(Evaluation {
        predictions,
        boxes,
        masks,
        warnings,
    })
}

/// Detectors and trainer wired from a config.
pub struct Endpoints {
    pub teacher: Box<dyn Detector>,
    pub trainer: Box<dyn Trainer>,
    pub student: Box<dyn Detector>,
}

impl Endpoints {
    /// `dataset` supplies the hidden ground truth for synthetic adapters.
    pub fn from_config(cfg: &PipelineConfig, dataset: &DatasetManifest) -> Result<Self, PipelineError> {
        let synth_err = |e: synthdet::SynthError| PipelineError::Config(e.to_string());
        let teacher: Box<dyn Detector> = match &cfg.teacher {
            TeacherConfig::Process { predict } => Box::new(ProcessDetector {
                endpoint: predict.endpoint(Role::Predict)?,
                prompt: cfg.prompt.clone(),
            }),
            TeacherConfig::Synthetic { noise, seed } => {
                Box::new(SyntheticDetector::new(dataset.clone(), *noise, *seed).map_err(synth_err)?)
            }
        };
        let (trainer, student): (Box<dyn Trainer>, Box<dyn Detector>) = match &cfg.student {
            StudentConfig::Process { train, predict } => (
                Box::new(ProcessTrainer {
                    endpoint: train.endpoint(Role::Train)?,
                }),
                Box::new(ProcessDetector {
                    endpoint: predict.endpoint(Role::Predict)?,
                    prompt: cfg.prompt.clone(),
                }),
            ),
            StudentConfig::Synthetic { noise, seed } => {
                let s = SyntheticStudent::new(dataset.clone(), *noise, *seed).map_err(synth_err)?;
                (Box::new(s.clone()), Box::new(s))
            }
        };
        Ok(Self {
            teacher,
            trainer,
            student,
        })
    }
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics_path: PathBuf,
    pub metrics: Value,
    pub student: Evaluation,
    pub pseudo_labels: Option<EvalResult>,
    pub teacher_baseline: Option<EvalResult>,
    pub records: Vec<StageRecord>,
}

pub fn load_dataset(source: &DatasetSource) -> Result<DatasetManifest, PipelineError> {
    match source {
        DatasetSource::Coco { path, bounds } => {
            dataio::load_coco_with(path, LoadOptions { bounds: *bounds }).map_err(PipelineError::data("load"))
        }
        DatasetSource::Synthetic { images, seed, scene } => {
            synthdet::generate_dataset(*images, *seed, scene).map_err(|e| PipelineError::Config(e.to_string()))
        }
    }
}

fn rel(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().into_owned()
}

fn hash_file(path: &Path, stage: &'static str) -> Result<String, PipelineError> {
    Ok(sha256_hex(&dataio::read_file(path).map_err(PipelineError::data(stage))?))
}

fn write(path: &Path, body: &str, stage: &'static str) -> Result<(), PipelineError> {
    dataio::write_file(path, body.as_bytes()).map_err(PipelineError::data(stage))
}

fn stage_dir(cfg_hash: &str, out: &Path, stage: &str, input_hash: &str) -> PathBuf {
    let key = sha256_hex(format!("{stage}\n{input_hash}\n{cfg_hash}").as_bytes());
    out.join("stages").join(format!("{stage}-{}", &key[..16]))
}

/// Completion marker of a cached stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Done {
    output_hash: String,
    kept: usize,
    dropped: usize,
    warnings: Vec<String>,
    /// Stage-specific outputs, paths relative to the output directory.
    outputs: BTreeMap<String, String>,
}

fn read_done(dir: &Path) -> Option<Done> {
    let bytes = std::fs::read(dir.join("done.json")).ok()?;
    serde_json::from_slice(&bytes).ok()
}

fn write_done(dir: &Path, done: &Done, stage: &'static str) -> Result<(), PipelineError> {
    let v = serde_json::to_value(done).expect("marker serializes");
    write(&dir.join("done.json"), &to_canonical_string(&v), stage)
}

/// Runs every stage, writes `metrics.json`, PR curves and
/// `provenance.json` under the output directory.
pub fn run(cfg: &PipelineConfig) -> Result<RunOutcome, PipelineError> {
    cfg.validate()?;
    let dataset = load_dataset(&cfg.dataset)?;
    let endpoints = Endpoints::from_config(cfg, &dataset)?;
    run_with(cfg, &dataset, &endpoints)
}

pub fn run_with(cfg: &PipelineConfig, dataset: &DatasetManifest, ep: &Endpoints) -> Result<RunOutcome, PipelineError> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    let cfg_hash = cfg.content_hash();
    let mut records = Vec::new();
    let mut warnings = Vec::new();

    // split
    let t0 = now_ms();
    let (train, eval) = dataio::split_dataset(dataset, cfg.split.train_size, cfg.split.seed)
        .map_err(PipelineError::data("split"))?;
    if eval.ground_truth().values().all(Vec::is_empty) {
        return Err(PipelineError::Data {
            stage: "split",
            source: DataError::Record {
                source_name: "dataset".into(),
                section: "annotations",
                index: 0,
                message: "the eval split has no ground truth".into(),
            },
        });
    }
    let train_images = train.without_annotations("split:train");
    let train_json = train_images.to_canonical_json();
    write(&out.join("split/train.json"), &train_json, "split")?;
    write(&out.join("split/eval.json"), &eval.to_canonical_json(), "split")?;
    let train_hash = sha256_hex(train_json.as_bytes());
    records.push(StageRecord {
        stage: "split".into(),
        input_hash: sha256_hex(dataset.to_canonical_json().as_bytes()),
        output_hash: train_hash.clone(),
        started_unix_ms: t0,
        finished_unix_ms: now_ms(),
        kept: train.len(),
        dropped: eval.len(),
        cached: false,
        warnings: vec![],
    });

    // pseudo_label
    const PL: &str = "pseudo_label";
    let t0 = now_ms();
    let dir = stage_dir(&cfg_hash, out, PL, &train_hash);
    let labeled_path = dir.join("labeled.json");
    let cached = read_done(&dir).filter(|d| hash_file(&labeled_path, PL).ok().as_ref() == Some(&d.output_hash));
    let (labeled, done, was_cached) = match cached {
        Some(d) => (dataio::load_coco(&labeled_path).map_err(PipelineError::data(PL))?, d, true),
        None => {
            let pl = stage_pseudo_label(cfg, ep.teacher.as_ref(), &train, &dir.join("work"))?;
            let body = pl.labeling.labeled.to_canonical_json();
            write(&labeled_path, &body, PL)?;
            let done = Done {
                output_hash: sha256_hex(body.as_bytes()),
                kept: pl.labeling.labeled.len(),
                dropped: pl.labeling.dropped.len(),
                warnings: pl.warnings,
                outputs: BTreeMap::new(),
            };
            write_done(&dir, &done, PL)?;
            (pl.labeling.labeled, done, false)
        }
    };
    warnings.extend(done.warnings.iter().map(|w| format!("{PL}: {w}")));
    let labeled_hash = done.output_hash.clone();
    records.push(StageRecord {
        stage: PL.into(),
        input_hash: train_hash,
        output_hash: done.output_hash,
        started_unix_ms: t0,
        finished_unix_ms: now_ms(),
        kept: done.kept,
        dropped: done.dropped,
        cached: was_cached,
        warnings: done.warnings,
    });
    let pseudo_quality = match evaluate_both(PL, &train.ground_truth(), labeled.annotations()) {
        Ok((b, _, _)) => Some(b),
        Err(PipelineError::Eval {
            source: EvalError::NoGroundTruth,
            ..
        }) => None,
        Err(e) => return Err(e),
    };

    // distill
    const DS: &str = "distill";
    let t0 = now_ms();
    let dir = stage_dir(&cfg_hash, out, DS, &labeled_hash);
    let cached = read_done(&dir).filter(|d| {
        d.outputs
            .get("artifact")
            .and_then(|a| hash_file(&out.join(a), DS).ok())
            .as_ref()
            == Some(&d.output_hash)
    });
    let (artifact, iterations, done, was_cached) = match cached {
        Some(d) => {
            let iterations: Vec<IterationRecord> = serde_json::from_str(&d.outputs["iterations"])
                .map_err(|e| PipelineError::Config(format!("corrupt cache marker in {}: {e}", dir.display())))?;
            (out.join(&d.outputs["artifact"]), iterations, d, true)
        }
        None => {
            let dist = stage_distill(cfg, ep.trainer.as_ref(), ep.student.as_ref(), &labeled, &train, &dir)?;
            let iterations: Vec<IterationRecord> = dist
                .iterations
                .iter()
                .map(|r| IterationRecord {
                    labels: rel(&r.labels, out).into(),
                    artifact: rel(&r.artifact, out).into(),
                    ..r.clone()
                })
                .collect();
            let done = Done {
                output_hash: hash_file(&dist.artifact, DS)?,
                kept: dist.final_labels.len(),
                dropped: train.len() - dist.final_labels.len(),
                warnings: vec![],
                outputs: [
                    ("artifact".to_string(), rel(&dist.artifact, out)),
                    (
                        "iterations".to_string(),
                        serde_json::to_string(&iterations).expect("records serialize"),
                    ),
                ]
                .into(),
            };
            write_done(&dir, &done, DS)?;
            (dist.artifact, iterations, done, false)
        }
    };
    let artifact_hash = done.output_hash.clone();
    records.push(StageRecord {
        stage: DS.into(),
        input_hash: labeled_hash,
        output_hash: done.output_hash,
        started_unix_ms: t0,
        finished_unix_ms: now_ms(),
        kept: done.kept,
        dropped: done.dropped,
        cached: was_cached,
        warnings: vec![],
    });

    // infer_eval (evaluation is cheap, so it is always recomputed)
    const IE: &str = "infer_eval";
    let t0 = now_ms();
    let dir = stage_dir(&cfg_hash, out, IE, &artifact_hash);
    let student = stage_infer_eval(cfg, ep.student.as_ref(), &artifact, &eval, &dir.join("work"))?;
    let predictions_json = to_canonical_string(
        &dataio::results_value(&eval, &student.predictions, None).map_err(PipelineError::data(IE))?,
    );
    write(&dir.join("predictions.json"), &predictions_json, IE)?;
    warnings.extend(student.warnings.iter().map(|w| format!("{IE}: {w}")));

    let teacher_baseline = if cfg.evaluate_teacher {
        let rule = LabelingRule {
            views: cfg.augmentations.views(),
            fusion: &cfg.fusion,
            filter: true,
            top1: cfg.top1,
        };
        let images = eval.without_annotations("eval");
        let t = label_images(ep.teacher.as_ref(), &images, &rule, None, &dir.join("teacher"), "teacher")
            .map_err(PipelineError::adapter(IE))?;
        Some(evaluate_both(IE, &eval.ground_truth(), t.labeled.annotations())?.0)
    } else {
        None
    };

    let metrics = json!({
        "config_hash": cfg_hash,
        "counts": {
            "train_images": train.len(),
            "eval_images": eval.len(),
            "pseudo_labeled": labeled.len(),
            "pseudo_dropped": train.len() - labeled.len(),
        },
        "iterations": iterations.iter().map(|r| json!({
            "iteration": r.iteration,
            "labeled_images": r.labeled_images,
            "labels": r.labels.to_string_lossy(),
            "artifact": r.artifact.to_string_lossy(),
        })).collect::<Vec<_>>(),
        "student": {
            "box": student.boxes.summary_json(),
            "mask": student.masks.as_ref().map(EvalResult::summary_json),
        },
        "pseudo_labels": pseudo_quality.as_ref().map(EvalResult::summary_json),
        "teacher_baseline": teacher_baseline.as_ref().map(EvalResult::summary_json),
        "warnings": warnings,
    });
    let metrics_body = to_canonical_string(&metrics);
    let metrics_path = out.join("metrics.json");
    write(&metrics_path, &metrics_body, IE)?;
    write(&out.join("pr_box.csv"), &student.boxes.pr_csv(), IE)?;
    if let Some(m) = &student.masks {
        write(&out.join("pr_mask.csv"), &m.pr_csv(), IE)?;
    }
    records.push(StageRecord {
        stage: IE.into(),
        input_hash: artifact_hash,
        output_hash: sha256_hex(metrics_body.as_bytes()),
        started_unix_ms: t0,
        finished_unix_ms: now_ms(),
        kept: student.predictions.len(),
        dropped: eval.len() - student.predictions.len(),
        cached: false,
        warnings: student.warnings.clone(),
    });
    validate_chain(&records)?;
    let prov = serde_json::to_value(&records).expect("records serialize");
    write(&out.join("provenance.json"), &to_canonical_string(&json!({"stages": prov})), IE)?;

    Ok(RunOutcome {
        metrics_path,
        metrics,
        student,
        pseudo_labels: pseudo_quality,
        teacher_baseline,
        records,
    })
}
