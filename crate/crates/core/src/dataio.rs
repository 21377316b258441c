//! Dataset manifests, COCO annotation/results files, uncompressed RLE and
//! seeded train/eval splitting.
//!
//! Boxes are normalized `x1y1x2y2` everywhere inside the crate; COCO pixel
//! `[x, y, w, h]` only appears in the functions that read or write files.
//! Output files are canonical JSON (see [`crate::json`]) so reruns diff
//! clean.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::augment::AugmentationSpec;
use crate::eval::Detections;
use crate::geometry::{BBox, BinaryMask, BoundsPolicy, GeometryError, Instance, DEFAULT_LABEL};
use crate::json::to_canonical_string;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{source_name}: invalid JSON at line {line}, column {column}: {message}")]
    Json {
        source_name: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{source_name}: {section}[{index}]: {message}")]
    Record {
        source_name: String,
        section: &'static str,
        index: usize,
        message: String,
    },
    #[error("duplicate image id {0}")]
    DuplicateImage(u64),
    #[error("image {0} has zero width or height")]
    ImageDimensions(u64),
    #[error("annotation references unknown image id {0}")]
    UnknownImage(u64),
    #[error("RLE counts sum to {got}, expected {expected}")]
    RleLength { expected: u64, got: u64 },
    #[error("train size {train_size} must be smaller than the image count {n_images}")]
    SplitSize { train_size: usize, n_images: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl DataError {
    fn json(source_name: &str, e: &serde_json::Error) -> Self {
        DataError::Json {
            source_name: source_name.to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

/// Reads a whole file, attaching the path to errors.
pub fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a file, creating parent directories.
pub fn write_file(path: &Path, contents: &[u8]) -> Result<(), DataError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| DataError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

/// Images plus optional per-image annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    images: Vec<ImageRecord>,
    /// Only images that carry annotations appear as keys.
    annotations: Detections,
    pub categories: BTreeMap<u64, String>,
    pub split_seed: Option<u64>,
    /// Free-text stage tag.
    pub provenance: String,
}

impl DatasetManifest {
    /// Images are kept sorted by id.
    pub fn new(mut images: Vec<ImageRecord>, provenance: impl Into<String>) -> Result<Self, DataError> {
        images.sort_by_key(|i| i.id);
        for w in images.windows(2) {
            if w[0].id == w[1].id {
                return Err(DataError::DuplicateImage(w[0].id));
            }
        }
        if let Some(i) = images.iter().find(|i| i.width == 0 || i.height == 0) {
            return Err(DataError::ImageDimensions(i.id));
        }
        Ok(Self {
            images,
            annotations: Detections::new(),
            categories: [(1, DEFAULT_LABEL.to_string())].into(),
            split_seed: None,
            provenance: provenance.into(),
        })
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images
            .binary_search_by_key(&id, |i| i.id)
            .ok()
            .map(|k| &self.images[k])
    }

    pub fn image_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.images.iter().map(|i| i.id)
    }

    pub fn annotations(&self) -> &Detections {
        &self.annotations
    }

    pub fn annotations_for(&self, id: u64) -> Option<&[Instance]> {
        self.annotations.get(&id).map(Vec::as_slice)
    }

    /// Replaces the annotations of one image. Masks must match the image size.
    pub fn set_annotations(&mut self, id: u64, instances: Vec<Instance>) -> Result<(), DataError> {
        let img = self.image(id).ok_or(DataError::UnknownImage(id))?;
        for inst in &instances {
            if let Some(m) = inst.mask() {
                if m.dims() != (img.width, img.height) {
                    return Err(GeometryError::DimensionMismatch(m.dims(), (img.width, img.height)).into());
                }
            }
        }
        self.annotations.insert(id, instances);
        Ok(())
    }

    /// Number of images that carry at least one annotation.
    pub fn labeled_count(&self) -> usize {
        self.annotations.values().filter(|v| !v.is_empty()).count()
    }

    /// Annotations for every image, with empty lists for unannotated ones.
    pub fn ground_truth(&self) -> Detections {
        self.images
            .iter()
            .map(|i| (i.id, self.annotations.get(&i.id).cloned().unwrap_or_default()))
            .collect()
    }

    /// Same images, no annotations.
    pub fn without_annotations(&self, provenance: impl Into<String>) -> Self {
        Self {
            annotations: Detections::new(),
            provenance: provenance.into(),
            ..self.clone()
        }
    }

    /// Restriction to `ids`; unknown ids are ignored.
    pub fn subset(&self, ids: &BTreeSet<u64>, provenance: impl Into<String>) -> Self {
        Self {
            images: self.images.iter().filter(|i| ids.contains(&i.id)).cloned().collect(),
            annotations: self
                .annotations
                .iter()
                .filter(|(k, _)| ids.contains(k))
                .map(|(k, v)| (*k, v.clone()))
                .collect(),
            categories: self.categories.clone(),
            split_seed: self.split_seed,
            provenance: provenance.into(),
        }
    }

    fn category_ids(&self) -> BTreeMap<String, u64> {
        let mut by_name: BTreeMap<String, u64> = BTreeMap::new();
        for (id, name) in &self.categories {
            by_name.entry(name.clone()).or_insert(*id);
        }
        let mut next = self.categories.keys().max().copied().unwrap_or(0) + 1;
        let labels: BTreeSet<&str> = self
            .annotations
            .values()
            .flatten()
            .map(|i| i.label())
            .collect();
        for l in labels {
            if !by_name.contains_key(l) {
                by_name.insert(l.to_string(), next);
                next += 1;
            }
        }
        by_name
    }

    pub fn to_coco_value(&self) -> Value {
        let cat_ids = self.category_ids();
        let mut categories: Vec<(u64, &String)> = cat_ids.iter().map(|(n, i)| (*i, n)).collect();
        categories.sort();
        let mut anns = Vec::new();
        for img in &self.images {
            for inst in self.annotations.get(&img.id).into_iter().flatten() {
                let mut rec = instance_record(inst, img, cat_ids[inst.label()]);
                rec.insert("id".into(), json!(anns.len() as u64 + 1));
                rec.insert("iscrowd".into(), json!(0u64));
                anns.push(Value::Object(rec));
            }
        }
        json!({
            "info": {
                "provenance": self.provenance,
                "split_seed": self.split_seed,
            },
            "images": self.images.iter().map(|i| json!({
                "id": i.id,
                "file_name": i.file_name,
                "width": i.width,
                "height": i.height,
            })).collect::<Vec<_>>(),
            "annotations": anns,
            "categories": categories.iter().map(|(id, name)| json!({"id": id, "name": name}))
                .collect::<Vec<_>>(),
        })
    }

    pub fn to_canonical_json(&self) -> String {
        to_canonical_string(&self.to_coco_value())
    }
}

fn instance_record(inst: &Instance, img: &ImageRecord, category_id: u64) -> Map<String, Value> {
    let (w, h) = (img.width as f64, img.height as f64);
    let b = inst.bbox();
    let bbox = [b.x1() * w, b.y1() * h, b.width() * w, b.height() * h].map(micro);
    let mut rec = Map::new();
    rec.insert("image_id".into(), json!(img.id));
    rec.insert("category_id".into(), json!(category_id));
    rec.insert("bbox".into(), json!(bbox));
    rec.insert("score".into(), json!(inst.score()));
    let area = match inst.mask() {
        Some(m) => {
            let rle = rle_encode(m);
            rec.insert(
                "segmentation".into(),
                json!({"size": [rle.height, rle.width], "counts": rle.counts}),
            );
            m.area() as f64
        }
        None => bbox[2] * bbox[3],
    };
    rec.insert("area".into(), json!(area));
    rec
}

/// Rounds to 1e-6, the precision of the canonical output.
fn micro(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Loading options for COCO-style files.
#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    pub bounds: BoundsPolicy,
}

fn parse_json(bytes: &[u8], source_name: &str) -> Result<Value, DataError> {
    serde_json::from_slice(bytes).map_err(|e| DataError::json(source_name, &e))
}

pub fn load_coco(path: &Path) -> Result<DatasetManifest, DataError> {
    load_coco_with(path, LoadOptions::default())
}

pub fn load_coco_with(path: &Path, opts: LoadOptions) -> Result<DatasetManifest, DataError> {
    let bytes = read_file(path)?;
    parse_coco(&bytes, &path.display().to_string(), opts)
}

struct RecordCtx<'a> {
    source_name: &'a str,
    section: &'static str,
    index: usize,
}

impl RecordCtx<'_> {
    fn err(&self, message: impl Into<String>) -> DataError {
        DataError::Record {
            source_name: self.source_name.to_string(),
            section: self.section,
            index: self.index,
            message: message.into(),
        }
    }

    fn u64_field(&self, obj: &Map<String, Value>, key: &str) -> Result<u64, DataError> {
        obj.get(key)
            .and_then(Value::as_u64)
            .ok_or_else(|| self.err(format!("missing or non-integer \"{key}\"")))
    }
}

/// Parses a COCO annotation document (subset: images, annotations with
/// pixel `bbox`, optional uncompressed RLE or polygon `segmentation`,
/// categories, and an `info` block carrying `split_seed`/`provenance`).
pub fn parse_coco(bytes: &[u8], source_name: &str, opts: LoadOptions) -> Result<DatasetManifest, DataError> {
    let root = parse_json(bytes, source_name)?;
    let top = RecordCtx { source_name, section: "root", index: 0 };
    let root = root.as_object().ok_or_else(|| top.err("expected a JSON object"))?;

    let empty = Vec::new();
    let array = |key: &'static str| -> Result<&Vec<Value>, DataError> {
        match root.get(key) {
            None | Some(Value::Null) => Ok(&empty),
            Some(Value::Array(a)) => Ok(a),
            Some(_) => Err(top.err(format!("\"{key}\" must be an array"))),
        }
    };

    let mut images = Vec::new();
    for (index, v) in array("images")?.iter().enumerate() {
        let ctx = RecordCtx { source_name, section: "images", index };
        let o = v.as_object().ok_or_else(|| ctx.err("expected an object"))?;
        let dim = |k: &str| -> Result<u32, DataError> {
            let d = ctx.u64_field(o, k)?;
            u32::try_from(d).ok().filter(|&d| d > 0).ok_or_else(|| ctx.err(format!("bad \"{k}\"")))
        };
        images.push(ImageRecord {
            id: ctx.u64_field(o, "id")?,
            file_name: o.get("file_name").and_then(Value::as_str).unwrap_or_default().to_string(),
            width: dim("width")?,
            height: dim("height")?,
        });
    }
    let mut manifest = DatasetManifest::new(images, "")?;

    let mut categories = BTreeMap::new();
    for (index, v) in array("categories")?.iter().enumerate() {
        let ctx = RecordCtx { source_name, section: "categories", index };
        let o = v.as_object().ok_or_else(|| ctx.err("expected an object"))?;
        let name = o.get("name").and_then(Value::as_str).ok_or_else(|| ctx.err("missing \"name\""))?;
        categories.insert(ctx.u64_field(o, "id")?, name.to_string());
    }
    if !categories.is_empty() {
        manifest.categories = categories;
    }

    if let Some(info) = root.get("info").and_then(Value::as_object) {
        manifest.provenance = info.get("provenance").and_then(Value::as_str).unwrap_or_default().to_string();
        manifest.split_seed = info.get("split_seed").and_then(Value::as_u64);
    }

    let mut per_image: Detections = Detections::new();
    for (index, v) in array("annotations")?.iter().enumerate() {
        let ctx = RecordCtx { source_name, section: "annotations", index };
        let rec = parse_instance(v, &manifest, &ctx, opts)?;
        per_image.entry(rec.image_id).or_default().push(rec.instance);
    }
    for (id, insts) in per_image {
        manifest.set_annotations(id, insts)?;
    }
    Ok(manifest)
}

/// One parsed detection/annotation record.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub image_id: u64,
    pub instance: Instance,
    /// `aug` extension field: the view the record was predicted under.
    pub aug: Option<AugmentationSpec>,
}

fn parse_instance(
    v: &Value,
    manifest: &DatasetManifest,
    ctx: &RecordCtx,
    opts: LoadOptions,
) -> Result<InstanceRecord, DataError> {
    let o = v.as_object().ok_or_else(|| ctx.err("expected an object"))?;
    let image_id = ctx.u64_field(o, "image_id")?;
    let img = manifest
        .image(image_id)
        .ok_or_else(|| ctx.err(format!("unknown image id {image_id}")))?;
    let bbox = o
        .get("bbox")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 4)
        .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
        .ok_or_else(|| ctx.err("\"bbox\" must be [x, y, w, h]"))?;
    let (w, h) = (img.width as f64, img.height as f64);
    let norm = [bbox[0] / w, bbox[1] / h, (bbox[0] + bbox[2]) / w, (bbox[1] + bbox[3]) / h];
    let bbox = BBox::with_policy(norm, opts.bounds).map_err(|e| ctx.err(e.to_string()))?;
    let score = match o.get("score") {
        None | Some(Value::Null) => 1.0,
        Some(s) => s.as_f64().ok_or_else(|| ctx.err("\"score\" must be a number"))?,
    };
    let label = match o.get("label").and_then(Value::as_str) {
        Some(l) => l.to_string(),
        None => match o.get("category_id").and_then(Value::as_u64) {
            Some(c) => manifest.categories.get(&c).cloned().unwrap_or_else(|| c.to_string()),
            None => DEFAULT_LABEL.to_string(),
        },
    };
    let mut instance = Instance::new(bbox, score)
        .map_err(|e| ctx.err(e.to_string()))?
        .with_label(label);
    match o.get("segmentation") {
        None | Some(Value::Null) => {}
        Some(seg) => {
            let mask = parse_segmentation(seg, img).map_err(|e| ctx.err(e))?;
            instance = instance.with_mask(mask);
        }
    }
    let aug = match o.get("aug") {
        None | Some(Value::Null) => None,
        Some(Value::String(t)) => Some(t.parse().map_err(|e: crate::augment::AugmentError| ctx.err(e.to_string()))?),
        Some(_) => return Err(ctx.err("\"aug\" must be a string token")),
    };
    Ok(InstanceRecord { image_id, instance, aug })
}

fn parse_segmentation(seg: &Value, img: &ImageRecord) -> Result<BinaryMask, String> {
    match seg {
        Value::Object(o) => {
            let size = o
                .get("size")
                .and_then(Value::as_array)
                .and_then(|a| a.iter().map(Value::as_u64).collect::<Option<Vec<u64>>>())
                .filter(|a| a.len() == 2)
                .ok_or("RLE \"size\" must be [height, width]")?;
            if (size[0], size[1]) != (img.height as u64, img.width as u64) {
                return Err(format!(
                    "RLE size {:?} does not match image {}x{}",
                    size, img.height, img.width
                ));
            }
            let counts = match o.get("counts") {
                Some(Value::Array(a)) => a
                    .iter()
                    .map(|c| c.as_u64().and_then(|c| u32::try_from(c).ok()))
                    .collect::<Option<Vec<u32>>>()
                    .ok_or("RLE counts must be non-negative integers")?,
                Some(Value::String(_)) => return Err("compressed RLE strings are not supported".into()),
                _ => return Err("RLE \"counts\" missing".into()),
            };
            let rle = RleMask {
                height: img.height,
                width: img.width,
                counts,
            };
            rle_decode(&rle).map_err(|e| e.to_string())
        }
        Value::Array(polys) => {
            let polys = polys
                .iter()
                .map(|p| {
                    p.as_array()
                        .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
                        .filter(|a| a.len() >= 6 && a.len() % 2 == 0)
                })
                .collect::<Option<Vec<_>>>()
                .ok_or("polygons must be flat [x0, y0, x1, y1, ...] lists of at least 3 points")?;
            rasterize_polygons(&polys, img.width, img.height).map_err(|e| e.to_string())
        }
        _ => Err("unsupported segmentation encoding".into()),
    }
}

/// Even-odd fill sampled at pixel centers; multiple polygons are unioned.
pub fn rasterize_polygons(polys: &[Vec<f64>], width: u32, height: u32) -> Result<BinaryMask, GeometryError> {
    BinaryMask::from_fn(width, height, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        polys.iter().any(|poly| {
            let pts: Vec<(f64, f64)> = poly.chunks(2).map(|c| (c[0], c[1])).collect();
            let mut inside = false;
            let mut j = pts.len() - 1;
            for i in 0..pts.len() {
                let ((xi, yi), (xj, yj)) = (pts[i], pts[j]);
                if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
                j = i;
            }
            inside
        })
    })
}

pub fn save_coco(manifest: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    write_file(path, manifest.to_canonical_json().as_bytes())
}

/// COCO results array. `aug`, when given, is written on every record.
pub fn results_value(
    manifest: &DatasetManifest,
    predictions: &Detections,
    aug: Option<&AugmentationSpec>,
) -> Result<Value, DataError> {
    let cat_ids = manifest.category_ids();
    let mut next = cat_ids.values().max().copied().unwrap_or(0) + 1;
    let mut extra: BTreeMap<String, u64> = BTreeMap::new();
    let mut out = Vec::new();
    for (id, insts) in predictions {
        let img = manifest.image(*id).ok_or(DataError::UnknownImage(*id))?;
        for inst in insts {
            let cat = match cat_ids.get(inst.label()) {
                Some(c) => *c,
                None => *extra.entry(inst.label().to_string()).or_insert_with(|| {
                    next += 1;
                    next - 1
                }),
            };
            let mut rec = instance_record(inst, img, cat);
            rec.insert("label".into(), json!(inst.label()));
            if let Some(a) = aug {
                rec.insert("aug".into(), json!(a.token()));
            }
            out.push(Value::Object(rec));
        }
    }
    Ok(Value::Array(out))
}

pub fn save_results(manifest: &DatasetManifest, predictions: &Detections, path: &Path) -> Result<(), DataError> {
    let v = results_value(manifest, predictions, None)?;
    write_file(path, to_canonical_string(&v).as_bytes())
}

/// Parses a COCO results array against `manifest`.
pub fn parse_results(bytes: &[u8], source_name: &str, manifest: &DatasetManifest) -> Result<Vec<InstanceRecord>, DataError> {
    let root = parse_json(bytes, source_name)?;
    let top = RecordCtx { source_name, section: "results", index: 0 };
    let arr = root.as_array().ok_or_else(|| top.err("expected a JSON array"))?;
    arr.iter()
        .enumerate()
        .map(|(index, v)| {
            let ctx = RecordCtx { source_name, section: "results", index };
            parse_instance(v, manifest, &ctx, LoadOptions::default())
        })
        .collect()
}

pub fn load_results(path: &Path, manifest: &DatasetManifest) -> Result<Detections, DataError> {
    let bytes = read_file(path)?;
    Ok(group_records(parse_results(&bytes, &path.display().to_string(), manifest)?))
}

pub fn group_records(records: Vec<InstanceRecord>) -> Detections {
    let mut out = Detections::new();
    for r in records {
        out.entry(r.image_id).or_default().push(r.instance);
    }
    out
}

/// Uncompressed COCO RLE: column-major run lengths starting with background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RleMask {
    pub height: u32,
    pub width: u32,
    pub counts: Vec<u32>,
}

pub fn rle_encode(m: &BinaryMask) -> RleMask {
    let (w, h) = m.dims();
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for x in 0..w {
        for y in 0..h {
            let v = m.get(x, y);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    RleMask { height: h, width: w, counts }
}

pub fn rle_decode(r: &RleMask) -> Result<BinaryMask, DataError> {
    let expected = r.height as u64 * r.width as u64;
    let got: u64 = r.counts.iter().map(|&c| c as u64).sum();
    if got != expected {
        return Err(DataError::RleLength { expected, got });
    }
    let mut m = BinaryMask::new(r.width, r.height)?;
    let h = r.height as u64;
    let mut pos = 0u64;
    for (k, &c) in r.counts.iter().enumerate() {
        if k % 2 == 1 {
            for p in pos..pos + c as u64 {
                m.set((p / h) as u32, (p % h) as u32, true);
            }
        }
        pos += c as u64;
    }
    Ok(m)
}

/// SplitMix64 (Steele, Lea & Flood). Pinned here so splits reproduce
/// across implementations.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform integer in `[0, bound)` by Lemire's multiply-shift with
    /// rejection (unbiased).
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let m = self.next_u64() as u128 * bound as u128;
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }
}

/// Seeded uniform split without replacement. Images are ordered by id,
/// shuffled by Fisher-Yates (`i` from `n-1` down to 1, swap with
/// `below(i+1)`), and the first `train_size` become the train split.
pub fn split_dataset(
    manifest: &DatasetManifest,
    train_size: usize,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), DataError> {
    let n = manifest.len();
    if train_size >= n {
        return Err(DataError::SplitSize { train_size, n_images: n });
    }
    let mut ids: Vec<u64> = manifest.image_ids().collect();
    let mut rng = SplitMix64::new(seed);
    for i in (1..n).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        ids.swap(i, j);
    }
    let train: BTreeSet<u64> = ids[..train_size].iter().copied().collect();
    let eval: BTreeSet<u64> = ids[train_size..].iter().copied().collect();
    let mut t = manifest.subset(&train, "split:train");
    let mut e = manifest.subset(&eval, "split:eval");
    t.split_seed = Some(seed);
    e.split_seed = Some(seed);
    Ok((t, e))
}
