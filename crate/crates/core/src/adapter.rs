//! Process-level detector protocol.
//!
//! The core writes a job file, runs the configured shell command with the
//! `{job}` and `{out}` placeholders replaced by quoted paths, waits with a
//! timeout, and reads `{out}` back. Predict jobs produce a COCO results
//! file; train jobs produce an opaque model artifact. The command also sees
//! the job's working directory in `PIPELINE_ADAPTER_WORKDIR`.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::augment::{AugmentationSpec, PredictionSet};
use crate::dataio::{self, DataError, DatasetManifest};
use crate::eval::Detections;
use crate::json::{sha256_hex, to_canonical_string};

/// Environment variable holding the adapter working directory.
pub const WORKDIR_ENV: &str = "PIPELINE_ADAPTER_WORKDIR";

const STDERR_TAIL: usize = 4096;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("invalid command template {template:?}: {reason}")]
    Template { template: String, reason: String },
    #[error("endpoint role is {got:?}, expected {expected:?}")]
    Role { expected: Role, got: Role },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to start `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("`{command}` exited with {}; stderr: {stderr}", exit_text(.code))]
    Exit {
        command: String,
        code: Option<i32>,
        stderr: String,
    },
    #[error("`{command}` timed out after {secs} s; stderr: {stderr}")]
    Timeout {
        command: String,
        secs: u64,
        stderr: String,
    },
    #[error("adapter output rejected: {0}")]
    Schema(#[from] DataError),
    #[error("results record {index} carries view {got:?}, job view is {expected:?}")]
    ViewMismatch {
        index: usize,
        expected: String,
        got: String,
    },
    #[error("adapter did not create the artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("in-process adapter failed: {0}")]
    InProcess(String),
}

fn exit_text(code: &Option<i32>) -> String {
    match code {
        Some(c) => format!("code {c}"),
        None => "a signal".to_string(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AdapterError + '_ {
    move |source| AdapterError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Predict,
    Train,
}

/// A shell command template with exactly one `{job}` and one `{out}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "EndpointSpec", into = "EndpointSpec")]
pub struct AdapterEndpoint {
    command: String,
    role: Role,
    timeout_secs: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EndpointSpec {
    command: String,
    role: Role,
    #[serde(default = "default_timeout")]
    timeout_secs: u64,
}

fn default_timeout() -> u64 {
    600
}

impl TryFrom<EndpointSpec> for AdapterEndpoint {
    type Error = AdapterError;
    fn try_from(s: EndpointSpec) -> Result<Self, Self::Error> {
        AdapterEndpoint::new(s.command, s.role, s.timeout_secs)
    }
}

impl From<AdapterEndpoint> for EndpointSpec {
    fn from(e: AdapterEndpoint) -> Self {
        EndpointSpec {
            command: e.command,
            role: e.role,
            timeout_secs: e.timeout_secs,
        }
    }
}

impl AdapterEndpoint {
    pub fn new(command: impl Into<String>, role: Role, timeout_secs: u64) -> Result<Self, AdapterError> {
        let command = command.into();
        for p in ["{job}", "{out}"] {
            let n = command.matches(p).count();
            if n != 1 {
                return Err(AdapterError::Template {
                    template: command,
                    reason: format!("placeholder {p} must appear exactly once, found {n}"),
                });
            }
        }
        if timeout_secs == 0 {
            return Err(AdapterError::Template {
                template: command,
                reason: "timeout must be positive".into(),
            });
        }
        Ok(Self {
            command,
            role,
            timeout_secs,
        })
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn timeout_secs(&self) -> u64 {
        self.timeout_secs
    }

    pub fn render(&self, job: &Path, out: &Path) -> String {
        self.command
            .replace("{job}", &shell_quote(&job.to_string_lossy()))
            .replace("{out}", &shell_quote(&out.to_string_lossy()))
    }

    fn expect_role(&self, expected: Role) -> Result<(), AdapterError> {
        if self.role != expected {
            return Err(AdapterError::Role {
                expected,
                got: self.role,
            });
        }
        Ok(())
    }

    /// Runs the rendered command under `sh -c` in the current directory.
    /// Stdout and stderr go to files next to the job file.
    pub fn execute(&self, job: &Path, out: &Path, workdir: &Path) -> Result<(), AdapterError> {
        let command = self.render(job, out);
        let stdout_path = job.with_extension("stdout.log");
        let stderr_path = job.with_extension("stderr.log");
        let stdout = File::create(&stdout_path).map_err(io_err(&stdout_path))?;
        let stderr = File::create(&stderr_path).map_err(io_err(&stderr_path))?;
        log::debug!("running adapter: {command}");
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&command)
            .env(WORKDIR_ENV, workdir)
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .spawn()
            .map_err(|source| AdapterError::Spawn {
                command: command.clone(),
                source,
            })?;
        let status = child
            .wait_timeout(Duration::from_secs(self.timeout_secs))
            .map_err(|source| AdapterError::Spawn {
                command: command.clone(),
                source,
            })?;
        let Some(status) = status else {
            let _ = child.kill();
            let _ = child.wait();
            return Err(AdapterError::Timeout {
                command,
                secs: self.timeout_secs,
                stderr: tail(&stderr_path),
            });
        };
        if !status.success() {
            return Err(AdapterError::Exit {
                command,
                code: status.code(),
                stderr: tail(&stderr_path),
            });
        }
        Ok(())
    }
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

fn tail(path: &Path) -> String {
    let mut buf = Vec::new();
    if let Ok(mut f) = File::open(path) {
        let _ = f.read_to_end(&mut buf);
    }
    let start = buf.len().saturating_sub(STDERR_TAIL);
    String::from_utf8_lossy(&buf[start..]).trim().to_string()
}

/// Inputs of one predict invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictJob {
    /// COCO manifest listing the images to label.
    pub manifest: PathBuf,
    pub prompt: String,
    pub augmentation: AugmentationSpec,
    pub artifact: Option<PathBuf>,
}

impl PredictJob {
    pub fn to_value(&self) -> Value {
        json!({
            "kind": "predict",
            "manifest": self.manifest.to_string_lossy(),
            "prompt": self.prompt,
            "augmentation": self.augmentation.token(),
            "artifact": self.artifact.as_ref().map(|p| p.to_string_lossy()),
        })
    }

    pub fn to_json(&self) -> String {
        to_canonical_string(&self.to_value())
    }

    pub fn from_json(bytes: &[u8], source_name: &str) -> Result<Self, DataError> {
        let v: Value = serde_json::from_slice(bytes).map_err(|e| DataError::Json {
            source_name: source_name.into(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let field = |k: &str| v.get(k).and_then(Value::as_str);
        let bad = |m: &str| DataError::Record {
            source_name: source_name.into(),
            section: "job",
            index: 0,
            message: m.into(),
        };
        if field("kind") != Some("predict") {
            return Err(bad("\"kind\" must be \"predict\""));
        }
        Ok(Self {
            manifest: field("manifest").ok_or_else(|| bad("missing \"manifest\""))?.into(),
            prompt: field("prompt").unwrap_or_default().to_string(),
            augmentation: field("augmentation")
                .ok_or_else(|| bad("missing \"augmentation\""))?
                .parse()
                .map_err(|e: crate::augment::AugmentError| bad(&e.to_string()))?,
            artifact: field("artifact").map(PathBuf::from),
        })
    }
}

/// Inputs of one train invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainJob {
    /// COCO manifest with the training labels.
    pub manifest: PathBuf,
    pub iteration: u32,
}

impl TrainJob {
    pub fn to_json(&self) -> String {
        to_canonical_string(&json!({
            "kind": "train",
            "manifest": self.manifest.to_string_lossy(),
            "iteration": self.iteration,
        }))
    }

    pub fn from_json(bytes: &[u8], source_name: &str) -> Result<Self, DataError> {
        let v: Value = serde_json::from_slice(bytes).map_err(|e| DataError::Json {
            source_name: source_name.into(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let bad = |m: &str| DataError::Record {
            source_name: source_name.into(),
            section: "job",
            index: 0,
            message: m.into(),
        };
        if v.get("kind").and_then(Value::as_str) != Some("train") {
            return Err(bad("\"kind\" must be \"train\""));
        }
        Ok(Self {
            manifest: v
                .get("manifest")
                .and_then(Value::as_str)
                .ok_or_else(|| bad("missing \"manifest\""))?
                .into(),
            iteration: v
                .get("iteration")
                .and_then(Value::as_u64)
                .and_then(|i| u32::try_from(i).ok())
                .unwrap_or(1),
        })
    }
}

/// File stem derived from the job contents, so identical jobs reuse names.
fn job_stem(kind: &str, job_json: &str) -> String {
    format!("{kind}-{}", &sha256_hex(job_json.as_bytes())[..16])
}

/// One [`PredictionSet`] per manifest image (empty when the adapter
/// reported nothing for it), in the frame of the job's view.
pub fn run_predict(
    endpoint: &AdapterEndpoint,
    job: &PredictJob,
    images: &DatasetManifest,
    workdir: &Path,
) -> Result<Vec<PredictionSet>, AdapterError> {
    endpoint.expect_role(Role::Predict)?;
    if let Some(a) = &job.artifact {
        if !a.exists() {
            return Err(AdapterError::MissingArtifact(a.clone()));
        }
    }
    std::fs::create_dir_all(workdir).map_err(io_err(workdir))?;
    let job_json = job.to_json();
    let stem = job_stem("predict", &job_json);
    let job_path = workdir.join(format!("{stem}.job.json"));
    let out_path = workdir.join(format!("{stem}.results.json"));
    dataio::write_file(&job_path, job_json.as_bytes())?;
    if out_path.exists() {
        std::fs::remove_file(&out_path).map_err(io_err(&out_path))?;
    }
    endpoint.execute(&job_path, &out_path, workdir)?;
    if !out_path.exists() {
        return Err(AdapterError::MissingArtifact(out_path));
    }
    let bytes = dataio::read_file(&out_path)?;
    let records = dataio::parse_results(&bytes, &out_path.display().to_string(), images)?;
    let token = job.augmentation.token();
    for (index, r) in records.iter().enumerate() {
        if let Some(a) = &r.aug {
            if *a != job.augmentation {
                return Err(AdapterError::ViewMismatch {
                    index,
                    expected: token,
                    got: a.token(),
                });
            }
        }
    }
    prediction_sets(images, dataio::group_records(records), job.augmentation)
}

/// Wraps per-image detections into prediction sets for every manifest image.
pub fn prediction_sets(
    images: &DatasetManifest,
    mut detections: Detections,
    view: AugmentationSpec,
) -> Result<Vec<PredictionSet>, AdapterError> {
    images
        .images()
        .iter()
        .map(|img| {
            let insts = detections.remove(&img.id).unwrap_or_default();
            PredictionSet::in_view(img.id, (img.width, img.height), view, insts)
                .map_err(|e| AdapterError::Schema(DataError::Record {
                    source_name: "predictions".into(),
                    section: "results",
                    index: 0,
                    message: format!("image {}: {e}", img.id),
                }))
        })
        .collect()
}

/// Path of the artifact the adapter created.
pub fn run_train(
    endpoint: &AdapterEndpoint,
    labels: &DatasetManifest,
    iteration: u32,
    workdir: &Path,
) -> Result<PathBuf, AdapterError> {
    endpoint.expect_role(Role::Train)?;
    check_train_labels(labels)?;
    std::fs::create_dir_all(workdir).map_err(io_err(workdir))?;
    let manifest_json = labels.to_canonical_json();
    let manifest_path = workdir.join(format!(
        "labels-{}.json",
        &sha256_hex(manifest_json.as_bytes())[..16]
    ));
    dataio::write_file(&manifest_path, manifest_json.as_bytes())?;
    let job = TrainJob {
        manifest: manifest_path,
        iteration,
    };
    let job_json = job.to_json();
    let stem = job_stem("train", &job_json);
    let job_path = workdir.join(format!("{stem}.job.json"));
    let out_path = workdir.join(format!("{stem}.artifact"));
    dataio::write_file(&job_path, job_json.as_bytes())?;
    if out_path.exists() {
        std::fs::remove_file(&out_path).map_err(io_err(&out_path))?;
    }
    endpoint.execute(&job_path, &out_path, workdir)?;
    if !out_path.exists() {
        return Err(AdapterError::MissingArtifact(out_path));
    }
    Ok(out_path)
}

/// Training needs at least one image, and every listed image labeled.
pub fn check_train_labels(labels: &DatasetManifest) -> Result<(), AdapterError> {
    if labels.labeled_count() == 0 {
        return Err(AdapterError::Precondition("training manifest has no annotated images".into()));
    }
    if let Some(id) = labels
        .image_ids()
        .find(|id| labels.annotations_for(*id).is_none_or(<[_]>::is_empty))
    {
        return Err(AdapterError::Precondition(format!(
            "training manifest lists image {id} without annotations"
        )));
    }
    Ok(())
}

/// Something that produces predictions for a set of images under one view.
pub trait Detector: Send + Sync {
    /// One prediction set per image of `images`, in the frame of `view`.
    fn predict(
        &self,
        images: &DatasetManifest,
        view: AugmentationSpec,
        artifact: Option<&Path>,
        workdir: &Path,
    ) -> Result<Vec<PredictionSet>, AdapterError>;
}

/// Something that fits a model to labels and returns an artifact path.
pub trait Trainer: Send + Sync {
    fn train(&self, labels: &DatasetManifest, iteration: u32, workdir: &Path) -> Result<PathBuf, AdapterError>;
}

/// [`Detector`] backed by an external predict command.
#[derive(Debug, Clone)]
pub struct ProcessDetector {
    pub endpoint: AdapterEndpoint,
    pub prompt: String,
}

impl Detector for ProcessDetector {
    fn predict(
        &self,
        images: &DatasetManifest,
        view: AugmentationSpec,
        artifact: Option<&Path>,
        workdir: &Path,
    ) -> Result<Vec<PredictionSet>, AdapterError> {
        std::fs::create_dir_all(workdir).map_err(io_err(workdir))?;
        let manifest_json = images.without_annotations(images.provenance.clone()).to_canonical_json();
        let manifest = workdir.join(format!(
            "images-{}.json",
            &sha256_hex(manifest_json.as_bytes())[..16]
        ));
        dataio::write_file(&manifest, manifest_json.as_bytes())?;
        let job = PredictJob {
            manifest,
            prompt: self.prompt.clone(),
            augmentation: view,
            artifact: artifact.map(Path::to_path_buf),
        };
        run_predict(&self.endpoint, &job, images, workdir)
    }
}

/// [`Trainer`] backed by an external train command.
#[derive(Debug, Clone)]
pub struct ProcessTrainer {
    pub endpoint: AdapterEndpoint,
}

impl Trainer for ProcessTrainer {
    fn train(&self, labels: &DatasetManifest, iteration: u32, workdir: &Path) -> Result<PathBuf, AdapterError> {
        run_train(&self.endpoint, labels, iteration, workdir)
    }
}
