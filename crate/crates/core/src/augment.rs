//! Test-time augmentation views and their inverse mapping.
//!
//! Geometric views (flips) act on normalized coordinates as exact
//! involutions. Photometric views (brightness, saturation, color shift) are
//! applied to pixels by the detector adapter; on coordinates they are the
//! identity.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, BinaryMask, GeometryError, Instance};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("unknown augmentation token {0:?}")]
    UnknownToken(String),
    #[error("bad parameter in augmentation token {0:?}")]
    BadParameter(String),
    #[error("augmentation set must contain the identity view exactly once (found {0})")]
    IdentityCount(usize),
    #[error("augmentation set is empty")]
    EmptySet,
    #[error("mask is {got:?} but the view is {expected:?}")]
    MaskDimensions {
        expected: (u32, u32),
        got: (u32, u32),
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A photometric parameter stored in hundredths, so that the two-decimal
/// token form is lossless.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Hundredths(i32);

impl Hundredths {
    /// Rounds `v` to the nearest hundredth.
    pub fn from_f64(v: f64) -> Option<Self> {
        let scaled = (v * 100.0).round();
        if !scaled.is_finite() || scaled.abs() > i32::MAX as f64 {
            return None;
        }
        Some(Self(scaled as i32))
    }

    pub fn value(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl fmt::Display for Hundredths {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let a = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:02}", a / 100, a % 100)
    }
}

/// One view `a_k` of the augmentation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugmentationSpec {
    Identity,
    HFlip,
    VFlip,
    /// Multiplicative brightness gain.
    Brightness(Hundredths),
    /// Saturation factor.
    Saturation(Hundredths),
    /// Additive color/hue shift.
    ColorShift(Hundredths),
}

impl AugmentationSpec {
    pub fn brightness(gain: f64) -> Result<Self, AugmentError> {
        positive(gain, "brightness").map(Self::Brightness)
    }

    pub fn saturation(factor: f64) -> Result<Self, AugmentError> {
        positive(factor, "saturation").map(Self::Saturation)
    }

    pub fn color_shift(shift: f64) -> Result<Self, AugmentError> {
        Hundredths::from_f64(shift)
            .map(Self::ColorShift)
            .ok_or_else(|| AugmentError::BadParameter(format!("color-shift:{shift}")))
    }

    pub fn is_geometric(&self) -> bool {
        matches!(self, Self::HFlip | Self::VFlip)
    }

    /// Original frame to augmented view.
    pub fn forward_box(&self, b: &BBox) -> BBox {
        // flips are involutions
        self.inverse_box(b)
    }

    /// Augmented view back to the original frame.
    pub fn inverse_box(&self, b: &BBox) -> BBox {
        match self {
            Self::HFlip => BBox::new(1.0 - b.x2(), b.y1(), 1.0 - b.x1(), b.y2())
                .expect("mirror of a valid box is valid"),
            Self::VFlip => BBox::new(b.x1(), 1.0 - b.y2(), b.x2(), 1.0 - b.y1())
                .expect("mirror of a valid box is valid"),
            _ => *b,
        }
    }

    pub fn forward_mask(&self, m: &BinaryMask) -> BinaryMask {
        self.inverse_mask(m)
    }

    pub fn inverse_mask(&self, m: &BinaryMask) -> BinaryMask {
        let (w, h) = m.dims();
        match self {
            Self::HFlip => BinaryMask::from_fn(w, h, |x, y| m.get(w - 1 - x, y)),
            Self::VFlip => BinaryMask::from_fn(w, h, |x, y| m.get(x, h - 1 - y)),
            _ => return m.clone(),
        }
        .expect("source mask has positive dimensions")
    }

    pub fn forward_instance(&self, inst: &Instance) -> Instance {
        self.map_instance(inst, true)
    }

    pub fn inverse_instance(&self, inst: &Instance) -> Instance {
        self.map_instance(inst, false)
    }

    fn map_instance(&self, inst: &Instance, forward: bool) -> Instance {
        if !self.is_geometric() {
            return inst.clone();
        }
        let bbox = if forward {
            self.forward_box(inst.bbox())
        } else {
            self.inverse_box(inst.bbox())
        };
        let mut out = inst.clone().with_bbox(bbox);
        out.set_mask(inst.mask().map(|m| self.inverse_mask(m)));
        out
    }

    /// Canonical token, e.g. `vflip` or `brightness:1.30`.
    pub fn token(&self) -> String {
        self.to_string()
    }
}

fn positive(v: f64, kind: &str) -> Result<Hundredths, AugmentError> {
    match Hundredths::from_f64(v) {
        Some(h) if h.0 > 0 => Ok(h),
        _ => Err(AugmentError::BadParameter(format!("{kind}:{v}"))),
    }
}

impl fmt::Display for AugmentationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => f.write_str("identity"),
            Self::HFlip => f.write_str("hflip"),
            Self::VFlip => f.write_str("vflip"),
            Self::Brightness(p) => write!(f, "brightness:{p}"),
            Self::Saturation(p) => write!(f, "saturation:{p}"),
            Self::ColorShift(p) => write!(f, "color-shift:{p}"),
        }
    }
}

impl FromStr for AugmentationSpec {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, param) = match s.split_once(':') {
            Some((k, p)) => (k, Some(p)),
            None => (s, None),
        };
        let num = || -> Result<f64, AugmentError> {
            param
                .ok_or_else(|| AugmentError::BadParameter(s.to_string()))?
                .parse::<f64>()
                .map_err(|_| AugmentError::BadParameter(s.to_string()))
        };
        let spec = match kind {
            "identity" | "hflip" | "vflip" if param.is_some() => {
                return Err(AugmentError::BadParameter(s.to_string()))
            }
            "identity" => Self::Identity,
            "hflip" => Self::HFlip,
            "vflip" => Self::VFlip,
            "brightness" => Self::brightness(num()?)?,
            "saturation" => Self::saturation(num()?)?,
            "color-shift" => Self::color_shift(num()?)?,
            _ => return Err(AugmentError::UnknownToken(s.to_string())),
        };
        Ok(spec)
    }
}

impl Serialize for AugmentationSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.token())
    }
}

impl<'de> Deserialize<'de> for AugmentationSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Ordered view list. Contains the identity view exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<AugmentationSpec>", into = "Vec<AugmentationSpec>")]
pub struct AugmentationSet(Vec<AugmentationSpec>);

impl AugmentationSet {
    pub fn new(views: Vec<AugmentationSpec>) -> Result<Self, AugmentError> {
        if views.is_empty() {
            return Err(AugmentError::EmptySet);
        }
        let ids = views
            .iter()
            .filter(|v| **v == AugmentationSpec::Identity)
            .count();
        if ids != 1 {
            return Err(AugmentError::IdentityCount(ids));
        }
        Ok(Self(views))
    }

    pub fn identity_only() -> Self {
        Self(vec![AugmentationSpec::Identity])
    }

    pub fn views(&self) -> &[AugmentationSpec] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for AugmentationSet {
    /// `{identity, vflip}`.
    fn default() -> Self {
        Self(vec![AugmentationSpec::Identity, AugmentationSpec::VFlip])
    }
}

impl TryFrom<Vec<AugmentationSpec>> for AugmentationSet {
    type Error = AugmentError;
    fn try_from(v: Vec<AugmentationSpec>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<AugmentationSet> for Vec<AugmentationSpec> {
    fn from(s: AugmentationSet) -> Self {
        s.0
    }
}

/// All instances for one image produced under one view.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub image_id: u64,
    pub width: u32,
    pub height: u32,
    /// View the detector saw.
    pub view: AugmentationSpec,
    /// Whether `instances` are already in original-image coordinates.
    pub original_frame: bool,
    pub instances: Vec<Instance>,
}

impl PredictionSet {
    /// Predictions expressed in the frame of `view`.
    pub fn in_view(
        image_id: u64,
        (width, height): (u32, u32),
        view: AugmentationSpec,
        instances: Vec<Instance>,
    ) -> Result<Self, AugmentError> {
        for inst in &instances {
            if let Some(m) = inst.mask() {
                if m.dims() != (width, height) {
                    return Err(AugmentError::MaskDimensions {
                        expected: (width, height),
                        got: m.dims(),
                    });
                }
            }
        }
        Ok(Self {
            image_id,
            width,
            height,
            view,
            original_frame: view == AugmentationSpec::Identity,
            instances,
        })
    }

    /// Maps every instance back through `view^-1`.
    pub fn inverse_mapped(&self) -> PredictionSet {
        if self.original_frame {
            return self.clone();
        }
        PredictionSet {
            instances: self
                .instances
                .iter()
                .map(|i| self.view.inverse_instance(i))
                .collect(),
            original_frame: true,
            ..self.clone()
        }
    }
}
