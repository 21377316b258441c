//! COCO-style single-class average precision for boxes and masks.
//!
//! AP is the 101-point interpolated area under the precision-recall curve,
//! averaged over IoU thresholds 0.50:0.05:0.95. A prediction matches a
//! ground truth when IoU >= threshold. There is no per-image detection cap.

use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::geometry::{box_iou, mask_iou, GeometryError, Instance};

/// Per-image instance lists keyed by image id.
pub type Detections = BTreeMap<u64, Vec<Instance>>;

pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no ground-truth instances; AP is undefined")]
    NoGroundTruth,
    #[error("prediction references unknown image id {0}")]
    UnknownImage(u64),
    #[error("mask evaluation requires masks on every instance (image {0})")]
    MissingMask(u64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouKind {
    #[default]
    Box,
    Mask,
}

impl IouKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IouKind::Box => "box",
            IouKind::Mask => "mask",
        }
    }
}

/// IoU thresholds `0.50, 0.55, ..., 0.95`, each computed as `n / 100` so the
/// values are the correctly rounded decimals.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Recall grid `0.00, 0.01, ..., 1.00`.
pub fn recall_grid() -> [f64; RECALL_POINTS] {
    std::array::from_fn(|i| i as f64 / 100.0)
}

fn pair_iou(p: &Instance, g: &Instance, kind: IouKind, image: u64) -> Result<f64, EvalError> {
    match kind {
        IouKind::Box => Ok(box_iou(p.bbox(), g.bbox())),
        IouKind::Mask => {
            let (Some(pm), Some(gm)) = (p.mask(), g.mask()) else {
                return Err(EvalError::MissingMask(image));
            };
            match mask_iou(pm, gm) {
                Ok(v) => Ok(v),
                // two empty masks never count as overlap
                Err(GeometryError::BothEmpty) => Ok(0.0),
                Err(e) => Err(e.into()),
            }
        }
    }
}

/// Matches `predictions` (already sorted by descending score) against
/// `gts`. Each prediction takes the unmatched ground truth with the highest
/// IoU >= `iou_t` (lowest index on ties). Returns the matched GT index per
/// prediction.
pub fn match_greedy(
    predictions: &[Instance],
    gts: &[Instance],
    iou_t: f64,
    kind: IouKind,
) -> Result<Vec<Option<usize>>, EvalError> {
    match_image(0, predictions, gts, iou_t, kind)
}

fn match_image<P: Borrow<Instance>>(
    image: u64,
    predictions: &[P],
    gts: &[Instance],
    iou_t: f64,
    kind: IouKind,
) -> Result<Vec<Option<usize>>, EvalError> {
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(predictions.len());
    for p in predictions {
        let p = p.borrow();
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let iou = pair_iou(p, g, kind, image)?;
            if iou >= iou_t && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
        }
        out.push(best.map(|(gi, _)| gi));
    }
    Ok(out)
}

/// One detection's outcome at a fixed IoU threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredMatch {
    pub score: f64,
    pub matched: bool,
}

/// Interpolated precision at each recall-grid point. `matches` are sorted
/// by descending score with a stable sort, so ties keep their input order.
pub fn precision_at_recall(
    matches: &[ScoredMatch],
    n_gt: usize,
) -> Result<[f64; RECALL_POINTS], EvalError> {
    if n_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let mut sorted = matches.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut recall = Vec::with_capacity(sorted.len());
    let mut precision = Vec::with_capacity(sorted.len());
    let mut tp = 0usize;
    for (k, m) in sorted.iter().enumerate() {
        tp += m.matched as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let grid = recall_grid();
    Ok(std::array::from_fn(|i| {
        let idx = recall.partition_point(|&r| r < grid[i]);
        precision.get(idx).copied().unwrap_or(0.0)
    }))
}

/// 101-point interpolated AP.
pub fn average_precision(matches: &[ScoredMatch], n_gt: usize) -> Result<f64, EvalError> {
    let p = precision_at_recall(matches, n_gt)?;
    Ok(p.iter().sum::<f64>() / RECALL_POINTS as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub iou_threshold: f64,
    /// Interpolated precision on the 101-point recall grid.
    pub precision: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub kind: IouKind,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `(iou_threshold, ap)` pairs in ascending threshold order.
    pub per_threshold: Vec<(f64, f64)>,
    pub pr_curves: Vec<PrCurve>,
    pub n_images: usize,
    pub n_gt: usize,
    pub n_pred: usize,
}

impl EvalResult {
    pub fn ap_at(&self, t: f64) -> Option<f64> {
        self.per_threshold
            .iter()
            .find(|(x, _)| (x - t).abs() < 1e-9)
            .map(|(_, ap)| *ap)
    }

    /// Summary for the metrics report (curves are exported separately).
    pub fn summary_json(&self) -> Value {
        json!({
            "kind": self.kind.as_str(),
            "ap": self.ap,
            "ap50": self.ap50,
            "ap75": self.ap75,
            "per_threshold": self.per_threshold.iter()
                .map(|(t, ap)| json!({"iou_threshold": t, "ap": ap}))
                .collect::<Vec<_>>(),
            "n_images": self.n_images,
            "n_gt": self.n_gt,
            "n_pred": self.n_pred,
        })
    }

    /// CSV with columns `iou_threshold,recall,precision`.
    pub fn pr_csv(&self) -> String {
        let grid = recall_grid();
        let mut out = String::from("iou_threshold,recall,precision\n");
        for c in &self.pr_curves {
            for (r, p) in grid.iter().zip(&c.precision) {
                let _ = writeln!(out, "{:.2},{:.2},{:.6}", c.iou_threshold, r, p);
            }
        }
        out
    }
}

struct Outcome<'a> {
    image: u64,
    inst: &'a Instance,
    matched: bool,
}

/// Evaluates `predictions` against `ground_truth`. Images present in the
/// ground truth but absent from the predictions count as empty prediction
/// lists; predictions for image ids outside the ground truth are errors.
pub fn evaluate(
    ground_truth: &Detections,
    predictions: &Detections,
    kind: IouKind,
) -> Result<EvalResult, EvalError> {
    if let Some(id) = predictions.keys().find(|id| !ground_truth.contains_key(id)) {
        return Err(EvalError::UnknownImage(*id));
    }
    let n_gt: usize = ground_truth.values().map(Vec::len).sum();
    if n_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let sorted: BTreeMap<u64, Vec<&Instance>> = predictions
        .iter()
        .map(|(id, preds)| {
            let mut v: Vec<&Instance> = preds.iter().collect();
            v.sort_by(|a, b| a.rank_cmp(b));
            (*id, v)
        })
        .collect();
    let n_pred = sorted.values().map(Vec::len).sum();

    let per_t: Vec<(f64, [f64; RECALL_POINTS])> = iou_thresholds()
        .par_iter()
        .map(|&t| {
            let mut outcomes: Vec<Outcome> = Vec::with_capacity(n_pred);
            for (id, gts) in ground_truth {
                let Some(preds) = sorted.get(id) else { continue };
                let m = match_image(*id, preds, gts, t, kind)?;
                outcomes.extend(preds.iter().zip(m).map(|(inst, g)| Outcome {
                    image: *id,
                    inst,
                    matched: g.is_some(),
                }));
            }
            outcomes.sort_by(|a, b| {
                b.inst
                    .score()
                    .total_cmp(&a.inst.score())
                    .then(a.image.cmp(&b.image))
                    .then_with(|| a.inst.rank_cmp(b.inst))
            });
            let matches: Vec<ScoredMatch> = outcomes
                .iter()
                .map(|o| ScoredMatch {
                    score: o.inst.score(),
                    matched: o.matched,
                })
                .collect();
            Ok((t, precision_at_recall(&matches, n_gt)?))
        })
        .collect::<Result<_, EvalError>>()?;

    let per_threshold: Vec<(f64, f64)> = per_t
        .iter()
        .map(|(t, p)| (*t, p.iter().sum::<f64>() / RECALL_POINTS as f64))
        .collect();
    let ap = per_threshold.iter().map(|(_, a)| a).sum::<f64>() / per_threshold.len() as f64;
    Ok(EvalResult {
        kind,
        ap,
        ap50: per_threshold[0].1,
        ap75: per_threshold[5].1,
        pr_curves: per_t
            .iter()
            .map(|(t, p)| PrCurve {
                iou_threshold: *t,
                precision: p.to_vec(),
            })
            .collect(),
        per_threshold,
        n_images: ground_truth.len(),
        n_gt,
        n_pred,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn inst(c: [f64; 4], s: f64) -> Instance {
        Instance::new(BBox::new(c[0], c[1], c[2], c[3]).unwrap(), s).unwrap()
    }

    #[test]
    fn thresholds_are_exact_decimals() {
        let t = iou_thresholds();
        assert_eq!(t[0], 0.5);
        assert_eq!(t[2], 0.6);
        assert_eq!(t[5], 0.75);
        assert_eq!(t[9], 0.95);
    }

    #[test]
    fn greedy_matching_examples() {
        let gt = inst([0.0, 0.0, 1.0, 1.0], 1.0);
        let p = inst([0.0, 0.0, 0.6, 1.0], 0.9);
        assert_eq!(box_iou(p.bbox(), gt.bbox()), 0.6);
        assert_eq!(
            match_greedy(std::slice::from_ref(&p), std::slice::from_ref(&gt), 0.5, IouKind::Box).unwrap(),
            vec![Some(0)]
        );
        assert_eq!(
            match_greedy(&[p], std::slice::from_ref(&gt), 0.75, IouKind::Box).unwrap(),
            vec![None]
        );
        let weak = inst([0.0, 0.0, 0.55, 1.0], 0.9);
        let strong = inst([0.0, 0.0, 0.95, 1.0], 0.8);
        assert_eq!(
            match_greedy(&[weak, strong], &[gt], 0.5, IouKind::Box).unwrap(),
            vec![Some(0), None]
        );
    }

    #[test]
    fn greedy_prefers_highest_iou_gt() {
        let g1 = inst([0.0, 0.0, 0.5, 0.5], 1.0);
        let g2 = inst([0.0, 0.0, 0.45, 0.5], 1.0);
        let p = inst([0.0, 0.0, 0.44, 0.5], 0.9);
        assert_eq!(
            match_greedy(&[p], &[g1, g2], 0.5, IouKind::Box).unwrap(),
            vec![Some(1)]
        );
    }

    #[test]
    fn ap_basic_cases() {
        let perfect = [
            ScoredMatch { score: 0.9, matched: true },
            ScoredMatch { score: 0.8, matched: true },
        ];
        assert_eq!(average_precision(&perfect, 2).unwrap(), 1.0);
        assert_eq!(average_precision(&[], 3).unwrap(), 0.0);
        assert_eq!(average_precision(&[], 0), Err(EvalError::NoGroundTruth));
    }

    #[test]
    fn single_pair_threshold_sweep() {
        let gt: Detections = [(1, vec![inst([0.0, 0.0, 1.0, 1.0], 1.0)])].into();
        let pred: Detections = [(1, vec![inst([0.0, 0.0, 0.6, 1.0], 0.7)])].into();
        let r = evaluate(&gt, &pred, IouKind::Box).unwrap();
        assert_eq!(r.ap50, 1.0);
        assert_eq!(r.ap75, 0.0);
        assert!((r.ap - 0.3).abs() < 1e-15);
        assert_eq!(r.ap_at(0.6), Some(1.0));
        assert_eq!(r.ap_at(0.65), Some(0.0));
    }

    #[test]
    fn evaluate_errors_and_missing_images() {
        let gt: Detections = [(1, vec![inst([0.0, 0.0, 0.5, 0.5], 1.0)]), (2, vec![])].into();
        let unknown: Detections = [(9, vec![])].into();
        assert_eq!(
            evaluate(&gt, &unknown, IouKind::Box),
            Err(EvalError::UnknownImage(9))
        );
        let none = evaluate(&gt, &Detections::new(), IouKind::Box).unwrap();
        assert_eq!(none.ap, 0.0);
        let empty_gt: Detections = [(1, vec![])].into();
        assert_eq!(
            evaluate(&empty_gt, &Detections::new(), IouKind::Box),
            Err(EvalError::NoGroundTruth)
        );
        assert_eq!(
            evaluate(&gt, &gt, IouKind::Mask),
            Err(EvalError::MissingMask(1))
        );
    }

    #[test]
    fn csv_has_one_row_per_grid_point() {
        let gt: Detections = [(1, vec![inst([0.0, 0.0, 0.5, 0.5], 1.0)])].into();
        let r = evaluate(&gt, &gt, IouKind::Box).unwrap();
        let csv = r.pr_csv();
        assert_eq!(csv.lines().count(), 1 + 10 * RECALL_POINTS);
        assert!(csv.lines().nth(1).unwrap().starts_with("0.50,0.00,1.000000"));
    }
}
