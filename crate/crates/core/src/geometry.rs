//! Box and binary-mask primitives.
//!
//! Boxes live in normalized image coordinates (fractions of width and
//! height). Coordinates are snapped to a dyadic grid of spacing 2^-53 on
//! construction. Every multiple of 2^-53 in `[0, 1]` has an exactly
//! representable mirror image `1 - v`, which makes flip transforms exact
//! involutions. Values in `[0.5, 1]` are already on the grid, smaller values
//! move by at most 2^-54.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default class label for single-class pipelines.
pub const DEFAULT_LABEL: &str = "spacecraft";

const GRID_SCALE: f64 = 9_007_199_254_740_992.0; // 2^53

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box coordinate is not finite: {0:?}")]
    NonFinite([f64; 4]),
    #[error("box coordinates out of [0,1]: {0:?}")]
    OutOfRange([f64; 4]),
    #[error("box has non-positive area: {0:?}")]
    ZeroArea([f64; 4]),
    #[error("mask dimensions must be positive, got {width}x{height}")]
    EmptyDimensions { width: u32, height: u32 },
    #[error("mask data length {got} does not match {width}x{height}")]
    DataLength { width: u32, height: u32, got: usize },
    #[error("mask dimension mismatch: {0:?} vs {1:?}")]
    DimensionMismatch((u32, u32), (u32, u32)),
    #[error("IoU of two empty masks is undefined")]
    BothEmpty,
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("score {0} outside [0,1]")]
    InvalidScore(f64),
}

/// How out-of-range coordinates are handled at construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundsPolicy {
    /// Reject coordinates outside `[0, 1]`.
    #[default]
    Strict,
    /// Clamp coordinates into `[0, 1]`; zero-area results are still rejected.
    Clamp,
}

#[inline]
fn snap(v: f64) -> f64 {
    (v * GRID_SCALE).round() / GRID_SCALE
}

/// Axis-aligned box `[x1, y1, x2, y2]` with `0 <= x1 < x2 <= 1` and
/// `0 <= y1 < y2 <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        Self::with_policy([x1, y1, x2, y2], BoundsPolicy::Strict)
    }

    pub fn clamped(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        Self::with_policy([x1, y1, x2, y2], BoundsPolicy::Clamp)
    }

    pub fn with_policy(c: [f64; 4], policy: BoundsPolicy) -> Result<Self, GeometryError> {
        if c.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite(c));
        }
        let c = match policy {
            BoundsPolicy::Strict => {
                if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(GeometryError::OutOfRange(c));
                }
                c
            }
            BoundsPolicy::Clamp => c.map(|v| v.clamp(0.0, 1.0)),
        };
        let [x1, y1, x2, y2] = c.map(snap);
        if x1 >= x2 || y1 >= y2 {
            return Err(GeometryError::ZeroArea(c));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        box_iou(self, other)
    }

    /// Total order on coordinates, used for deterministic tie-breaking.
    pub fn lex_cmp(&self, other: &BBox) -> Ordering {
        self.coords()
            .iter()
            .zip(other.coords().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            x1: f64,
            y1: f64,
            x2: f64,
            y2: f64,
        }
        let r = Raw::deserialize(d)?;
        BBox::new(r.x1, r.y1, r.x2, r.y2).map_err(serde::de::Error::custom)
    }
}

/// Intersection over union of two valid boxes.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Row-major per-pixel occupancy grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl BinaryMask {
    /// All-background mask.
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyDimensions { width, height });
        }
        Ok(Self {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        })
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<bool>) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyDimensions { width, height });
        }
        if data.len() != width as usize * height as usize {
            return Err(GeometryError::DataLength {
                width,
                height,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Build a mask by evaluating `f(x, y)` for every pixel.
    pub fn from_fn(
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> bool,
    ) -> Result<Self, GeometryError> {
        let mut m = Self::new(width, height)?;
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        Ok(m)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let w = self.width;
        self.data[(y * w + x) as usize] = v;
    }

    /// Row-major pixel slice.
    pub fn data(&self) -> &[bool] {
        &self.data
    }

    /// Foreground pixel count.
    pub fn area(&self) -> u64 {
        self.data.iter().filter(|&&v| v).count() as u64
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Coordinates `(x, y)` of every foreground pixel in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(move |(i, _)| (i as u32 % w, i as u32 / w))
    }
}

/// Pixel IoU of two equally sized masks. Two empty masks are an error.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, GeometryError> {
    if a.dims() != b.dims() {
        return Err(GeometryError::DimensionMismatch(a.dims(), b.dims()));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &q) in a.data.iter().zip(b.data.iter()) {
        inter += (p && q) as u64;
        union += (p || q) as u64;
    }
    if union == 0 {
        return Err(GeometryError::BothEmpty);
    }
    Ok(inter as f64 / union as f64)
}

/// Tightest normalized box around the foreground, using pixel edges:
/// pixel column `x` spans `[x/W, (x+1)/W]`.
pub fn mask_to_bbox(m: &BinaryMask) -> Result<BBox, GeometryError> {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
    let mut any = false;
    for (x, y) in m.foreground() {
        any = true;
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    if !any {
        return Err(GeometryError::EmptyMask);
    }
    let (w, h) = (m.width as f64, m.height as f64);
    BBox::new(
        x0 as f64 / w,
        y0 as f64 / h,
        (x1 + 1) as f64 / w,
        (y1 + 1) as f64 / h,
    )
}

/// One prediction or annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    bbox: BBox,
    mask: Option<BinaryMask>,
    score: f64,
    label: String,
}

impl Instance {
    pub fn new(bbox: BBox, score: f64) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(GeometryError::InvalidScore(score));
        }
        Ok(Self {
            bbox,
            mask: None,
            score,
            label: DEFAULT_LABEL.to_string(),
        })
    }

    /// Ground-truth style instance with score 1.
    pub fn annotation(bbox: BBox) -> Self {
        Self::new(bbox, 1.0).expect("unit score is valid")
    }

    pub fn with_mask(mut self, mask: BinaryMask) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn with_score(mut self, score: f64) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(GeometryError::InvalidScore(score));
        }
        self.score = score;
        Ok(self)
    }

    pub fn with_bbox(mut self, bbox: BBox) -> Self {
        self.bbox = bbox;
        self
    }

    pub fn set_mask(&mut self, mask: Option<BinaryMask>) {
        self.mask = mask;
    }

    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }

    pub fn mask(&self) -> Option<&BinaryMask> {
        self.mask.as_ref()
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Descending score, then lexicographic box, then label. A total order
    /// that does not depend on input position.
    pub fn rank_cmp(&self, other: &Instance) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.bbox.lex_cmp(&other.bbox))
            .then_with(|| self.label.cmp(&other.label))
    }
}
