//! Synthetic single-object scenes, a noisy detector and an affine-correcting
//! student.
//!
//! All randomness flows from explicit seeds. Per-draw seeds come from
//! [`derive_seed`]: the base seed is fed through SplitMix64 and each tag is
//! xor-ed into the stream in turn, so draws for different images and views
//! are independent and can be generated in any order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adapter::{check_train_labels, prediction_sets, AdapterError, Detector, Trainer};
use crate::augment::{AugmentationSpec, PredictionSet};
use crate::dataio::{DatasetManifest, ImageRecord, SplitMix64};
use crate::eval::Detections;
use crate::geometry::{box_iou, BBox, BinaryMask, Instance};
use crate::json::sha256_hex;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("dataset size must be at least 1")]
    EmptyDataset,
    #[error("canvas must be at least 16x16, got {0}x{1}")]
    Canvas(u32, u32),
    #[error("invalid noise model: {0}")]
    Noise(String),
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("no ground truth for image {0}")]
    UnknownImage(u64),
}

/// Mixes `tags` into `base`.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = SplitMix64::new(base).next_u64();
    for &t in tags {
        s = SplitMix64::new(s ^ t).next_u64();
    }
    s
}

/// Stable 64-bit tag for a view token.
pub fn view_tag(view: &AugmentationSpec) -> u64 {
    let d = Sha256::digest(view.token().as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

const TAG_SCENE: u64 = 0x0053_4345_4e45; // "SCENE"
const TAG_DETECT: u64 = 0x4445_5445_4354; // "DETECT"
const TAG_TRAIN: u64 = 0x0054_5241_494e; // "TRAIN"

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: u32,
    pub height: u32,
    /// Attach rectangle-union masks to ground truth and detections.
    pub masks: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            masks: true,
        }
    }
}

/// One image with its single ground-truth instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: ImageRecord,
    pub gt: Instance,
}

/// Cross-shaped union of two rectangles inside `b`: a vertical body spanning
/// the middle 40% of the width and a horizontal panel spanning the middle
/// 30% of the height, both reaching the box edges.
pub fn render_mask(b: &BBox, width: u32, height: u32) -> BinaryMask {
    let (w, h) = (width as f64, height as f64);
    let (bw, bh) = (b.width(), b.height());
    let body = [b.x1() + 0.3 * bw, b.y1(), b.x2() - 0.3 * bw, b.y2()];
    let panel = [b.x1(), b.y1() + 0.35 * bh, b.x2(), b.y2() - 0.35 * bh];
    let inside = |r: &[f64; 4], cx: f64, cy: f64| cx >= r[0] && cx < r[2] && cy >= r[1] && cy < r[3];
    BinaryMask::from_fn(width, height, |x, y| {
        let (cx, cy) = ((x as f64 + 0.5) / w, (y as f64 + 0.5) / h);
        inside(&body, cx, cy) || inside(&panel, cx, cy)
    })
    .expect("canvas dimensions are positive")
}

/// Box with area fraction in `[0.01, 0.25]` and aspect ratio in `[0.5, 2]`,
/// placed uniformly, edges on the pixel grid.
fn sample_box(rng: &mut ChaCha8Rng, width: u32, height: u32) -> BBox {
    let (w, h) = (width as f64, height as f64);
    let area = rng.gen_range(0.01..=0.25);
    let aspect: f64 = rng.gen_range(0.5..=2.0);
    let pw = ((area * aspect).sqrt() * w).round().clamp(2.0, w);
    let ph = ((area / aspect).sqrt() * h).round().clamp(2.0, h);
    let x0 = rng.gen_range(0..=(width - pw as u32)) as f64;
    let y0 = rng.gen_range(0..=(height - ph as u32)) as f64;
    BBox::new(x0 / w, y0 / h, (x0 + pw) / w, (y0 + ph) / h).expect("pixel box inside the canvas")
}

pub fn generate_scene(id: u64, seed: u64, cfg: &SceneConfig) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_SCENE, id]));
    let bbox = sample_box(&mut rng, cfg.width, cfg.height);
    let mut gt = Instance::annotation(bbox);
    if cfg.masks {
        gt = gt.with_mask(render_mask(&bbox, cfg.width, cfg.height));
    }
    SyntheticScene {
        image: ImageRecord {
            id,
            file_name: format!("synth_{id:05}.png"),
            width: cfg.width,
            height: cfg.height,
        },
        gt,
    }
}

/// `n` scenes with ids `1..=n`, as a manifest carrying ground truth.
pub fn generate_dataset(n: usize, seed: u64, cfg: &SceneConfig) -> Result<DatasetManifest, SynthError> {
    if n == 0 {
        return Err(SynthError::EmptyDataset);
    }
    if cfg.width < 16 || cfg.height < 16 {
        return Err(SynthError::Canvas(cfg.width, cfg.height));
    }
    let scenes: Vec<SyntheticScene> = (1..=n as u64)
        .into_par_iter()
        .map(|id| generate_scene(id, seed, cfg))
        .collect();
    let mut m = DatasetManifest::new(scenes.iter().map(|s| s.image.clone()).collect(), "synthetic")
        .expect("generated ids are unique");
    for s in scenes {
        m.set_annotations(s.image.id, vec![s.gt]).expect("masks match the canvas");
    }
    Ok(m)
}

/// Detector noise. Jitter and bias act on box corners in the frame of the
/// view the detector sees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    /// Standard deviation of the Gaussian added to each corner coordinate.
    pub jitter_sigma: f64,
    /// Probability that the object is not detected.
    pub miss_rate: f64,
    /// Mean of the Poisson count of false boxes per image.
    pub clutter_rate: f64,
    /// Score is `clamp(IoU + Normal(0, score_sigma), 0, 1)`.
    pub score_sigma: f64,
    /// Constant offset added to `[x1, y1, x2, y2]`.
    pub bias: [f64; 4],
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            jitter_sigma: 0.02,
            miss_rate: 0.05,
            clutter_rate: 0.3,
            score_sigma: 0.05,
            bias: [0.0; 4],
        }
    }
}

impl NoiseModel {
    /// Exact ground truth with score 1.
    pub fn zero() -> Self {
        Self {
            jitter_sigma: 0.0,
            miss_rate: 0.0,
            clutter_rate: 0.0,
            score_sigma: 0.0,
            bias: [0.0; 4],
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Noise(m.to_string()));
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return bad("jitter_sigma must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.miss_rate) {
            return bad("miss_rate must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.clutter_rate) {
            return bad("clutter_rate must be in [0, 1]");
        }
        if !(self.score_sigma >= 0.0 && self.score_sigma.is_finite()) {
            return bad("score_sigma must be finite and >= 0");
        }
        if self.bias.iter().any(|b| !b.is_finite()) {
            return bad("bias must be finite");
        }
        Ok(())
    }

    fn score(&self, rng: &mut ChaCha8Rng, iou: f64) -> f64 {
        let noise = if self.score_sigma > 0.0 {
            Normal::new(0.0, self.score_sigma).expect("positive sigma").sample(rng)
        } else {
            0.0
        };
        (iou + noise).clamp(0.0, 1.0)
    }

    /// `b` plus bias and independent per-corner jitter, clamped into the
    /// unit square. `None` when the result has no area.
    fn perturb(&self, rng: &mut ChaCha8Rng, b: &BBox) -> Option<BBox> {
        let mut c = b.coords();
        for (v, bias) in c.iter_mut().zip(self.bias) {
            *v += bias;
            if self.jitter_sigma > 0.0 {
                *v += Normal::new(0.0, self.jitter_sigma).expect("positive sigma").sample(rng);
            }
        }
        BBox::clamped(c[0], c[1], c[2], c[3]).ok()
    }
}

/// Detections for `scene` as seen under `view`, in the view's frame.
pub fn noisy_detect(scene: &SyntheticScene, noise: &NoiseModel, view: AugmentationSpec, seed: u64) -> PredictionSet {
    let (w, h) = (scene.image.width, scene.image.height);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_DETECT, scene.image.id, view_tag(&view)]));
    let gt_view = view.forward_box(scene.gt.bbox());
    let with_masks = scene.gt.mask().is_some();
    let make = |rng: &mut ChaCha8Rng, b: BBox| {
        let score = noise.score(rng, box_iou(&b, &gt_view));
        let mut inst = Instance::new(b, score).expect("clamped score").with_label(scene.gt.label());
        if with_masks {
            inst = inst.with_mask(render_mask(&b, w, h));
        }
        inst
    };
    let mut out = Vec::new();
    if !rng.gen_bool(noise.miss_rate) {
        if let Some(b) = noise.perturb(&mut rng, &gt_view) {
            out.push(make(&mut rng, b));
        }
    }
    if noise.clutter_rate > 0.0 {
        let n = Poisson::new(noise.clutter_rate).expect("positive rate").sample(&mut rng) as usize;
        for _ in 0..n {
            let b = sample_box(&mut rng, w, h);
            out.push(make(&mut rng, b));
        }
    }
    PredictionSet::in_view(scene.image.id, (w, h), view, out).expect("masks rendered at image size")
}

fn scene(gt: &DatasetManifest, img: &ImageRecord) -> Result<SyntheticScene, SynthError> {
    let inst = gt
        .annotations_for(img.id)
        .and_then(|a| a.first())
        .ok_or(SynthError::UnknownImage(img.id))?;
    Ok(SyntheticScene {
        image: img.clone(),
        gt: inst.clone(),
    })
}

fn scenes_for(gt: &DatasetManifest, images: &DatasetManifest) -> Result<Vec<SyntheticScene>, SynthError> {
    images.images().iter().map(|img| scene(gt, img)).collect()
}

/// Detector that looks up ground truth and degrades it with `noise`.
#[derive(Debug, Clone)]
pub struct SyntheticDetector {
    gt: DatasetManifest,
    pub noise: NoiseModel,
    pub seed: u64,
}

impl SyntheticDetector {
    pub fn new(gt: DatasetManifest, noise: NoiseModel, seed: u64) -> Result<Self, SynthError> {
        noise.validate()?;
        Ok(Self { gt, noise, seed })
    }

    /// Per-image predictions for `images` under `view`, in the view's frame.
    pub fn predict(&self, images: &DatasetManifest, view: AugmentationSpec) -> Result<Detections, SynthError> {
        let scenes = scenes_for(&self.gt, images)?;
        Ok(scenes
            .par_iter()
            .map(|s| (s.image.id, noisy_detect(s, &self.noise, view, self.seed).instances))
            .collect())
    }
}

/// Per-coordinate affine model of the student's raw detector relative to
/// its training labels: `raw ≈ gain * label + bias`. Applying the model
/// inverts it, `corrected = (raw - bias) / gain`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentModel {
    pub gain: [f64; 4],
    pub bias: [f64; 4],
    pub n_labels: usize,
}

impl StudentModel {
    pub fn identity() -> Self {
        Self {
            gain: [1.0; 4],
            bias: [0.0; 4],
            n_labels: 0,
        }
    }

    /// Least-squares fit from `(raw, label)` pairs. Each coordinate
    /// regresses the label on the raw output, `label ≈ s * raw + o`, and
    /// stores `gain = 1/s`, `bias = -o/s`.
    pub fn fit(pairs: &[(BBox, BBox)]) -> Result<Self, SynthError> {
        if pairs.len() < 2 {
            return Err(SynthError::DegenerateFit(format!(
                "need at least 2 labeled images, got {}",
                pairs.len()
            )));
        }
        let n = pairs.len() as f64;
        let mut gain = [0.0; 4];
        let mut bias = [0.0; 4];
        for k in 0..4 {
            let mx = pairs.iter().map(|(r, _)| r.coords()[k]).sum::<f64>() / n;
            let my = pairs.iter().map(|(_, l)| l.coords()[k]).sum::<f64>() / n;
            let (mut sxx, mut sxy) = (0.0, 0.0);
            for (r, l) in pairs {
                let dx = r.coords()[k] - mx;
                sxx += dx * dx;
                sxy += dx * (l.coords()[k] - my);
            }
            if sxx <= f64::EPSILON * n || sxy.abs() <= f64::EPSILON * n {
                return Err(SynthError::DegenerateFit(format!("coordinate {k} has no spread")));
            }
            let s = sxy / sxx;
            let o = my - s * mx;
            gain[k] = 1.0 / s;
            bias[k] = -o / s;
        }
        Ok(Self {
            gain,
            bias,
            n_labels: pairs.len(),
        })
    }

    pub fn apply(&self, raw: &BBox) -> Option<BBox> {
        let c = raw.coords();
        let m: [f64; 4] = std::array::from_fn(|k| (c[k] - self.bias[k]) / self.gain[k]);
        BBox::clamped(m[0], m[1], m[2], m[3]).ok()
    }

    pub fn load(path: &Path) -> Result<Self, std::io::Error> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn to_json(&self) -> String {
        let v = serde_json::to_value(self).expect("plain struct serializes");
        crate::json::to_canonical_string(&v)
    }
}

/// Student whose raw detector is ground truth degraded by `noise` (typically
/// a systematic bias and less jitter than the teacher). Training fits a
/// [`StudentModel`] from fresh raw draws on the labeled images; prediction
/// draws again and applies the fitted correction.
#[derive(Debug, Clone)]
pub struct SyntheticStudent {
    gt: DatasetManifest,
    pub noise: NoiseModel,
    pub seed: u64,
}

impl SyntheticStudent {
    pub fn new(gt: DatasetManifest, noise: NoiseModel, seed: u64) -> Result<Self, SynthError> {
        noise.validate()?;
        Ok(Self { gt, noise, seed })
    }

    fn raw(&self, scene: &SyntheticScene, stream: u64) -> Option<BBox> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[stream, scene.image.id]));
        if rng.gen_bool(self.noise.miss_rate) {
            return None;
        }
        self.noise.perturb(&mut rng, scene.gt.bbox())
    }

    /// Fits on the top-scored label of every labeled image. `iteration`
    /// selects an independent stream of raw draws, so retraining starts
    /// from scratch.
    pub fn fit(&self, labels: &DatasetManifest, iteration: u32) -> Result<StudentModel, SynthError> {
        let stream = derive_seed(TAG_TRAIN, &[iteration as u64]);
        let labeled: Vec<(u64, BBox)> = labels
            .annotations()
            .iter()
            .filter_map(|(id, insts)| crate::fusion::select_top1(insts).map(|i| (*id, *i.bbox())))
            .collect();
        let mut pairs = Vec::with_capacity(labeled.len());
        for (id, label) in labeled {
            let img = labels.image(id).ok_or(SynthError::UnknownImage(id))?;
            if let Some(r) = self.raw(&scene(&self.gt, img)?, stream) {
                pairs.push((r, label));
            }
        }
        StudentModel::fit(&pairs)
    }

    /// Corrected single detection per image, in the frame of `view`.
    pub fn predict(&self, model: &StudentModel, images: &DatasetManifest, view: AugmentationSpec) -> Result<Detections, SynthError> {
        let scenes = scenes_for(&self.gt, images)?;
        let tag = derive_seed(TAG_DETECT, &[view_tag(&view)]);
        Ok(scenes
            .par_iter()
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[tag, s.image.id, 1]));
                let det = self.raw(s, tag).and_then(|r| model.apply(&r)).map(|b| {
                    let b = view.forward_box(&b);
                    let score = self.noise.score(&mut rng, box_iou(&b, &view.forward_box(s.gt.bbox())));
                    let mut inst = Instance::new(b, score).expect("clamped score").with_label(s.gt.label());
                    if s.gt.mask().is_some() {
                        inst = inst.with_mask(render_mask(&b, s.image.width, s.image.height));
                    }
                    inst
                });
                (s.image.id, det.into_iter().collect())
            })
            .collect())
    }
}

impl Detector for SyntheticDetector {
    fn predict(
        &self,
        images: &DatasetManifest,
        view: AugmentationSpec,
        _artifact: Option<&Path>,
        _workdir: &Path,
    ) -> Result<Vec<PredictionSet>, AdapterError> {
        let dets = SyntheticDetector::predict(self, images, view).map_err(in_process)?;
        prediction_sets(images, dets, view)
    }
}

impl Detector for SyntheticStudent {
    fn predict(
        &self,
        images: &DatasetManifest,
        view: AugmentationSpec,
        artifact: Option<&Path>,
        _workdir: &Path,
    ) -> Result<Vec<PredictionSet>, AdapterError> {
        let path = artifact.ok_or_else(|| AdapterError::Precondition("student predict needs an artifact".into()))?;
        if !path.exists() {
            return Err(AdapterError::MissingArtifact(path.to_path_buf()));
        }
        let model = StudentModel::load(path).map_err(|source| AdapterError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let dets = SyntheticStudent::predict(self, &model, images, view).map_err(in_process)?;
        prediction_sets(images, dets, view)
    }
}

impl Trainer for SyntheticStudent {
    fn train(&self, labels: &DatasetManifest, iteration: u32, workdir: &Path) -> Result<PathBuf, AdapterError> {
        check_train_labels(labels)?;
        let model = self.fit(labels, iteration).map_err(in_process)?;
        let body = model.to_json();
        let path = workdir.join(format!("student-{iteration}-{}.json", &sha256_hex(body.as_bytes())[..16]));
        crate::dataio::write_file(&path, body.as_bytes())?;
        Ok(path)
    }
}

fn in_process(e: SynthError) -> AdapterError {
    AdapterError::InProcess(e.to_string())
}

/// Per-image ground-truth boxes, for diagnostics.
pub fn gt_boxes(gt: &DatasetManifest) -> BTreeMap<u64, BBox> {
    gt.annotations()
        .iter()
        .filter_map(|(id, v)| v.first().map(|i| (*id, *i.bbox())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::mask_to_bbox;

    fn cfg() -> SceneConfig {
        SceneConfig {
            width: 64,
            height: 48,
            masks: true,
        }
    }

    #[test]
    fn dataset_is_deterministic_and_valid() {
        let a = generate_dataset(100, 7, &cfg()).unwrap();
        let b = generate_dataset(100, 7, &cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_canonical_json(), b.to_canonical_json());
        assert_ne!(a, generate_dataset(100, 8, &cfg()).unwrap());
        for insts in a.annotations().values() {
            assert_eq!(insts.len(), 1);
            let g = &insts[0];
            let area = g.bbox().area();
            assert!(area > 0.005 && area < 0.3, "{area}");
            assert_eq!(mask_to_bbox(g.mask().unwrap()).unwrap(), *g.bbox());
        }
        assert_eq!(generate_dataset(1, 0, &cfg()).unwrap().len(), 1);
        assert_eq!(generate_dataset(0, 0, &cfg()), Err(SynthError::EmptyDataset));
    }

    #[test]
    fn zero_noise_is_exact() {
        let m = generate_dataset(20, 3, &cfg()).unwrap();
        let det = SyntheticDetector::new(m.clone(), NoiseModel::zero(), 1).unwrap();
        for view in [AugmentationSpec::Identity, AugmentationSpec::VFlip, AugmentationSpec::HFlip] {
            let preds = det.predict(&m, view).unwrap();
            for (id, insts) in &preds {
                let gt = &m.annotations_for(*id).unwrap()[0];
                assert_eq!(insts.len(), 1);
                assert_eq!(view.inverse_box(insts[0].bbox()), *gt.bbox());
                assert_eq!(insts[0].score(), 1.0);
            }
        }
    }

    #[test]
    fn miss_rate_one_is_empty() {
        let m = generate_dataset(10, 3, &cfg()).unwrap();
        let noise = NoiseModel {
            miss_rate: 1.0,
            clutter_rate: 0.0,
            ..NoiseModel::default()
        };
        let det = SyntheticDetector::new(m.clone(), noise, 1).unwrap();
        assert!(det.predict(&m, AugmentationSpec::Identity).unwrap().values().all(Vec::is_empty));
    }

    #[test]
    fn views_draw_independent_noise() {
        let m = generate_dataset(5, 3, &cfg()).unwrap();
        let noise = NoiseModel {
            miss_rate: 0.0,
            clutter_rate: 0.0,
            ..NoiseModel::default()
        };
        let det = SyntheticDetector::new(m.clone(), noise, 1).unwrap();
        let a = det.predict(&m, AugmentationSpec::Identity).unwrap();
        let b = det.predict(&m, AugmentationSpec::VFlip).unwrap();
        let a1 = a[&1][0].bbox();
        let b1 = AugmentationSpec::VFlip.inverse_box(b[&1][0].bbox());
        assert_ne!(*a1, b1);
        assert_eq!(a, det.predict(&m, AugmentationSpec::Identity).unwrap());
    }

    #[test]
    fn noise_validation() {
        let bad = NoiseModel {
            miss_rate: 1.5,
            ..NoiseModel::default()
        };
        assert!(bad.validate().is_err());
        let neg = NoiseModel {
            jitter_sigma: -0.1,
            ..NoiseModel::default()
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn fit_identity_and_bias() {
        let m = generate_dataset(50, 11, &cfg()).unwrap();
        let student = SyntheticStudent::new(m.clone(), NoiseModel::zero(), 5).unwrap();
        let model = student.fit(&m, 1).unwrap();
        for k in 0..4 {
            assert!((model.gain[k] - 1.0).abs() < 1e-6);
            assert!(model.bias[k].abs() < 1e-6);
        }

        // labels shifted by +0.05 on both x coordinates
        let mut shifted = m.clone();
        for id in m.image_ids() {
            let g = &m.annotations_for(id).unwrap()[0];
            let b = g.bbox();
            let moved = BBox::clamped(b.x1() + 0.05, b.y1(), b.x2() + 0.05, b.y2()).unwrap();
            shifted.set_annotations(id, vec![g.clone().with_bbox(moved)]).unwrap();
        }
        // keep only images whose shifted box was not clamped
        let keep = m
            .image_ids()
            .filter(|id| m.annotations_for(*id).unwrap()[0].bbox().x2() + 0.05 <= 1.0)
            .collect();
        let shifted = shifted.subset(&keep, "shifted");
        let model = student.fit(&shifted, 1).unwrap();
        assert!((model.bias[0] + 0.05).abs() < 1e-3, "{:?}", model.bias);
        assert!((model.bias[2] + 0.05).abs() < 1e-3, "{:?}", model.bias);
        assert!(model.bias[1].abs() < 1e-3 && model.bias[3].abs() < 1e-3);
    }

    #[test]
    fn fit_needs_two_labels() {
        let m = generate_dataset(3, 11, &cfg()).unwrap();
        let one = m.subset(&[1].into(), "one");
        let student = SyntheticStudent::new(m, NoiseModel::zero(), 5).unwrap();
        assert!(matches!(student.fit(&one, 1), Err(SynthError::DegenerateFit(_))));
    }

    #[test]
    fn correction_removes_student_bias() {
        let m = generate_dataset(200, 2, &SceneConfig { masks: false, ..cfg() }).unwrap();
        let noise = NoiseModel {
            jitter_sigma: 0.005,
            miss_rate: 0.0,
            clutter_rate: 0.0,
            score_sigma: 0.0,
            bias: [0.03, -0.02, 0.03, -0.02],
        };
        let student = SyntheticStudent::new(m.clone(), noise, 9).unwrap();
        let model = student.fit(&m, 1).unwrap();
        let preds = student.predict(&model, &m, AugmentationSpec::Identity).unwrap();
        let gt = gt_boxes(&m);
        let mean_iou: f64 = preds
            .iter()
            .filter_map(|(id, v)| v.first().map(|i| box_iou(i.bbox(), &gt[id])))
            .sum::<f64>()
            / preds.len() as f64;
        assert!(mean_iou > 0.9, "{mean_iou}");
    }

    #[test]
    fn model_json_round_trip() {
        let m = StudentModel {
            gain: [1.0, 0.5, 2.0, 1.25],
            bias: [0.0, -0.05, 0.125, 0.0],
            n_labels: 3,
        };
        let back: StudentModel = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }
}
