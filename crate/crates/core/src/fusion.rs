//! Merging multi-view predictions into refined pseudo-labels.
//!
//! [`wbf`] pools every instance from the inverse-mapped views, visits them in
//! descending score order and either joins the cluster whose running fused
//! box overlaps most (IoU >= tau) or opens a new cluster. The fused box is the
//! score-weighted mean of member boxes and the fused score is the plain mean
//! of member scores (no rescaling by view count). NMS and Soft-NMS are kept as
//! baselines.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{AugmentationSpec, PredictionSet};
use crate::geometry::{box_iou, BBox, BinaryMask, GeometryError, Instance};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("IoU threshold {0} outside (0,1]")]
    IouThreshold(f64),
    #[error("score threshold {0} outside [0,1]")]
    ScoreThreshold(f64),
    #[error("soft-nms sigma must be positive, got {0}")]
    Sigma(f64),
    #[error("prediction sets disagree on image: {0} vs {1}")]
    MixedImages(u64, u64),
    #[error("prediction set for image {0} under view {1} is not in the original frame")]
    NotInOriginalFrame(u64, AugmentationSpec),
    #[error("member masks have different dimensions: {0:?} vs {1:?}")]
    MaskDimensions((u32, u32), (u32, u32)),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelVote {
    Majority,
    #[default]
    ScoreWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionAlgorithm {
    #[default]
    Wbf,
    Nms,
    SoftNms,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SoftNmsDecay {
    /// `s *= 1 - IoU` for overlaps at or above the IoU threshold.
    #[default]
    Linear,
    /// `s *= exp(-IoU^2 / sigma)` for every overlap.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Cluster / suppression IoU threshold tau.
    pub iou_threshold: f64,
    /// Confidence threshold theta.
    pub score_threshold: f64,
    pub label_vote: LabelVote,
    pub algorithm: FusionAlgorithm,
    pub soft_nms_decay: SoftNmsDecay,
    pub soft_nms_sigma: f64,
    /// Soft-NMS drops instances whose decayed score falls below this.
    pub soft_nms_min_score: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.55,
            score_threshold: 0.5,
            label_vote: LabelVote::ScoreWeighted,
            algorithm: FusionAlgorithm::Wbf,
            soft_nms_decay: SoftNmsDecay::Linear,
            soft_nms_sigma: 0.5,
            soft_nms_min_score: 0.001,
        }
    }
}

impl FusionConfig {
    pub fn new(iou_threshold: f64, score_threshold: f64) -> Result<Self, FusionError> {
        let cfg = Self {
            iou_threshold,
            score_threshold,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(FusionError::IouThreshold(self.iou_threshold));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(FusionError::ScoreThreshold(self.score_threshold));
        }
        if self.soft_nms_sigma.is_nan() || self.soft_nms_sigma <= 0.0 {
            return Err(FusionError::Sigma(self.soft_nms_sigma));
        }
        Ok(())
    }
}

/// An instance together with the prediction set it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMember {
    /// Index of the source prediction set in the input slice.
    pub source: usize,
    pub view: AugmentationSpec,
    pub instance: Instance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedCluster {
    /// Members in the order they joined (descending score).
    pub members: Vec<ClusterMember>,
    pub fused: Instance,
}

fn member_cmp(a: &ClusterMember, b: &ClusterMember) -> Ordering {
    a.instance
        .rank_cmp(&b.instance)
        .then_with(|| a.view.token().cmp(&b.view.token()))
        .then_with(|| {
            let ma = a.instance.mask().map(|m| (m.dims(), m.data()));
            let mb = b.instance.mask().map(|m| (m.dims(), m.data()));
            ma.cmp(&mb)
        })
}

fn fused_geometry(members: &[ClusterMember]) -> (BBox, f64) {
    let n = members.len() as f64;
    let weight_sum: f64 = members.iter().map(|m| m.instance.score()).sum();
    let mut coords = [0.0f64; 4];
    for (k, c) in coords.iter_mut().enumerate() {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut acc = 0.0;
        for m in members {
            let v = m.instance.bbox().coords()[k];
            lo = lo.min(v);
            hi = hi.max(v);
            acc += if weight_sum > 0.0 {
                m.instance.score() * v
            } else {
                v
            };
        }
        let avg = if weight_sum > 0.0 { acc / weight_sum } else { acc / n };
        // rounding can leave the member envelope by an ulp
        *c = avg.clamp(lo, hi);
    }
    let bbox = BBox::with_policy(coords, crate::geometry::BoundsPolicy::Clamp)
        .unwrap_or(*members[0].instance.bbox());

    let (lo, hi) = members.iter().fold((1.0f64, 0.0f64), |(lo, hi), m| {
        (lo.min(m.instance.score()), hi.max(m.instance.score()))
    });
    let mean = members.iter().map(|m| m.instance.score()).sum::<f64>() / n;
    (bbox, mean.clamp(lo, hi))
}

fn vote_label(members: &[ClusterMember], vote: LabelVote) -> String {
    let mut tally: BTreeMap<&str, f64> = BTreeMap::new();
    for m in members {
        let w = match vote {
            LabelVote::Majority => 1.0,
            LabelVote::ScoreWeighted => m.instance.score(),
        };
        *tally.entry(m.instance.label()).or_default() += w;
    }
    let best = tally.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    // members are in rank order, so the first tied label belongs to the
    // highest-scoring member
    members
        .iter()
        .map(|m| m.instance.label())
        .find(|l| tally[l] == best)
        .unwrap_or_default()
        .to_string()
}

/// Score-weighted per-pixel vote over members that carry a mask, binarized
/// at 0.5. `None` when no member has a mask.
pub fn fuse_member_masks(members: &[ClusterMember]) -> Result<Option<BinaryMask>, FusionError> {
    let masked: Vec<(&BinaryMask, f64)> = members
        .iter()
        .filter_map(|m| m.instance.mask().map(|mask| (mask, m.instance.score())))
        .collect();
    let Some(&(first, _)) = masked.first() else {
        return Ok(None);
    };
    let dims = first.dims();
    if let Some((m, _)) = masked.iter().find(|(m, _)| m.dims() != dims) {
        return Err(FusionError::MaskDimensions(dims, m.dims()));
    }
    let total: f64 = masked.iter().map(|(_, s)| s).sum();
    let uniform = total <= 0.0;
    let denom = if uniform { masked.len() as f64 } else { total };
    let mut votes = vec![0.0f64; first.data().len()];
    for (mask, s) in &masked {
        let w = if uniform { 1.0 } else { *s };
        for (v, &p) in votes.iter_mut().zip(mask.data()) {
            if p {
                *v += w;
            }
        }
    }
    let data = votes.into_iter().map(|v| v / denom >= 0.5).collect();
    Ok(Some(BinaryMask::from_vec(dims.0, dims.1, data)?))
}

pub fn fuse_masks(cluster: &FusedCluster) -> Result<Option<BinaryMask>, FusionError> {
    fuse_member_masks(&cluster.members)
}

fn check_sets(predictions: &[PredictionSet]) -> Result<(), FusionError> {
    if let Some(first) = predictions.first() {
        for p in predictions {
            if p.image_id != first.image_id {
                return Err(FusionError::MixedImages(first.image_id, p.image_id));
            }
            if !p.original_frame {
                return Err(FusionError::NotInOriginalFrame(p.image_id, p.view));
            }
        }
    }
    Ok(())
}

fn pool(predictions: &[PredictionSet]) -> Vec<ClusterMember> {
    let mut pooled: Vec<ClusterMember> = predictions
        .iter()
        .enumerate()
        .flat_map(|(source, p)| {
            p.instances.iter().map(move |inst| ClusterMember {
                source,
                view: p.view,
                instance: inst.clone(),
            })
        })
        .collect();
    pooled.sort_by(member_cmp);
    pooled
}

/// Weighted boxes fusion over inverse-mapped prediction sets of one image.
pub fn wbf(
    predictions: &[PredictionSet],
    cfg: &FusionConfig,
) -> Result<Vec<FusedCluster>, FusionError> {
    cfg.validate()?;
    check_sets(predictions)?;

    struct Open {
        members: Vec<ClusterMember>,
        bbox: BBox,
        score: f64,
    }
    let mut clusters: Vec<Open> = Vec::new();
    for member in pool(predictions) {
        let bbox = *member.instance.bbox();
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in clusters.iter().enumerate() {
            let iou = box_iou(&c.bbox, &bbox);
            if iou >= cfg.iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((i, iou));
            }
        }
        match best {
            Some((i, _)) => {
                let c = &mut clusters[i];
                c.members.push(member);
                (c.bbox, c.score) = fused_geometry(&c.members);
            }
            None => clusters.push(Open {
                bbox,
                score: member.instance.score(),
                members: vec![member],
            }),
        }
    }

    clusters
        .into_iter()
        .map(|c| {
            let label = vote_label(&c.members, cfg.label_vote);
            let mut fused = Instance::new(c.bbox, c.score)?.with_label(label);
            fused.set_mask(fuse_member_masks(&c.members)?);
            Ok(FusedCluster {
                members: c.members,
                fused,
            })
        })
        .collect()
}

/// Greedy NMS: kept instances have pairwise IoU below `iou_threshold`.
pub fn nms(instances: &[Instance], iou_threshold: f64) -> Vec<Instance> {
    let mut sorted: Vec<&Instance> = instances.iter().collect();
    sorted.sort_by(|a, b| a.rank_cmp(b));
    let mut kept: Vec<Instance> = Vec::new();
    for inst in sorted {
        if kept
            .iter()
            .all(|k| box_iou(k.bbox(), inst.bbox()) < iou_threshold)
        {
            kept.push(inst.clone());
        }
    }
    kept
}

/// Soft-NMS: overlapping instances are down-weighted instead of removed.
pub fn soft_nms(instances: &[Instance], cfg: &FusionConfig) -> Vec<Instance> {
    let mut pending: Vec<Instance> = instances.to_vec();
    let mut kept = Vec::new();
    while !pending.is_empty() {
        let (idx, _) = pending
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| a.rank_cmp(b))
            .expect("non-empty");
        let top = pending.swap_remove(idx);
        pending = pending
            .into_iter()
            .filter_map(|inst| {
                let iou = box_iou(top.bbox(), inst.bbox());
                let factor = match cfg.soft_nms_decay {
                    SoftNmsDecay::Linear if iou >= cfg.iou_threshold => 1.0 - iou,
                    SoftNmsDecay::Linear => 1.0,
                    SoftNmsDecay::Gaussian => (-(iou * iou) / cfg.soft_nms_sigma).exp(),
                };
                let s = inst.score() * factor;
                (s >= cfg.soft_nms_min_score).then(|| inst.with_score(s).expect("decayed score"))
            })
            .collect();
        kept.push(top);
    }
    kept
}

/// Keeps instances with `score >= theta`, preserving order.
pub fn confidence_filter<I>(instances: I, theta: f64) -> Vec<Instance>
where
    I: IntoIterator<Item = Instance>,
{
    instances
        .into_iter()
        .filter(|i| i.score() >= theta)
        .collect()
}

/// Highest score wins; ties go to the larger box, then to the
/// lexicographically smaller coordinates.
pub fn select_top1<'a, I>(instances: I) -> Option<Instance>
where
    I: IntoIterator<Item = &'a Instance>,
{
    instances
        .into_iter()
        .min_by(|a, b| {
            b.score()
                .total_cmp(&a.score())
                .then_with(|| b.bbox().area().total_cmp(&a.bbox().area()))
                .then_with(|| a.bbox().lex_cmp(b.bbox()))
                .then_with(|| a.label().cmp(b.label()))
        })
        .cloned()
}

/// Fuses inverse-mapped views with the configured algorithm and returns the
/// merged instances (before confidence filtering).
pub fn fuse(predictions: &[PredictionSet], cfg: &FusionConfig) -> Result<Vec<Instance>, FusionError> {
    match cfg.algorithm {
        FusionAlgorithm::Wbf => Ok(wbf(predictions, cfg)?
            .into_iter()
            .map(|c| c.fused)
            .collect()),
        FusionAlgorithm::Nms | FusionAlgorithm::SoftNms => {
            cfg.validate()?;
            check_sets(predictions)?;
            let pooled: Vec<Instance> = pool(predictions).into_iter().map(|m| m.instance).collect();
            Ok(match cfg.algorithm {
                FusionAlgorithm::Nms => nms(&pooled, cfg.iou_threshold),
                _ => soft_nms(&pooled, cfg),
            })
        }
    }
}
