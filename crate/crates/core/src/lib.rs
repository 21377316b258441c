//! Pseudo-labeling pipeline for single-object spacecraft detection:
//! test-time augmentation, weighted box fusion, confidence filtering,
//! student distillation and COCO-style evaluation.

pub mod adapter;
pub mod augment;
pub mod dataio;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod json;
pub mod pipeline;
pub mod synthdet;

pub use augment::{AugmentationSet, AugmentationSpec, PredictionSet};
pub use dataio::{DatasetManifest, ImageRecord};
pub use eval::{evaluate, Detections, EvalResult, IouKind};
pub use fusion::{confidence_filter, fuse, select_top1, wbf, FusionConfig};
pub use geometry::{box_iou, mask_iou, BBox, BinaryMask, Instance};
