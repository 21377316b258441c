//! Reference implementations used as test oracles. They share no code with
//! the library beyond its public types.

#![allow(dead_code)]

use pseudolabel::augment::{AugmentationSpec, PredictionSet};
use pseudolabel::geometry::{BBox, Instance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// IoU by counting pixel centers of an `n`×`n` grid inside each box.
pub fn grid_iou(a: &BBox, b: &BBox, n: u32) -> f64 {
    let span = |lo: f64, hi: f64| -> (u32, u32) {
        // centers (i + 0.5) / n with lo <= center < hi
        let first = ((lo * n as f64) - 0.5).ceil().max(0.0) as u32;
        let end = ((hi * n as f64) - 0.5).ceil().clamp(0.0, n as f64) as u32;
        (first, end.max(first))
    };
    let (ax, bx) = (span(a.x1(), a.x2()), span(b.x1(), b.x2()));
    let (ay, by) = (span(a.y1(), a.y2()), span(b.y1(), b.y2()));
    let len = |s: (u32, u32)| (s.1 - s.0) as u64;
    let overlap = |s: (u32, u32), t: (u32, u32)| (s.1.min(t.1)).saturating_sub(s.0.max(t.0)) as u64;
    let inter = overlap(ax, bx) * overlap(ay, by);
    let union = len(ax) * len(ay) + len(bx) * len(by) - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Closed-form IoU written independently of the library.
pub fn ref_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    let area = |c: [f64; 4]| (c[2] - c[0]) * (c[3] - c[1]);
    inter / (area(a) + area(b) - inter)
}

/// Grid snapping applied by box construction.
pub fn snap(v: f64) -> f64 {
    let scale = 2f64.powi(53);
    (v * scale).round() / scale
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefMember {
    pub view: String,
    pub coords: [f64; 4],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefCluster {
    pub members: Vec<RefMember>,
    pub coords: [f64; 4],
    pub score: f64,
}

fn ref_fused(members: &[RefMember]) -> ([f64; 4], f64) {
    let total: f64 = members.iter().map(|m| m.score).sum();
    let mut c = [0.0; 4];
    for (k, out) in c.iter_mut().enumerate() {
        let lo = members.iter().map(|m| m.coords[k]).fold(f64::INFINITY, f64::min);
        let hi = members.iter().map(|m| m.coords[k]).fold(f64::NEG_INFINITY, f64::max);
        let avg = if total > 0.0 {
            members.iter().map(|m| m.score * m.coords[k]).sum::<f64>() / total
        } else {
            members.iter().map(|m| m.coords[k]).sum::<f64>() / members.len() as f64
        };
        *out = snap(avg.max(lo).min(hi).clamp(0.0, 1.0));
    }
    let n = members.len() as f64;
    let lo = members.iter().map(|m| m.score).fold(f64::INFINITY, f64::min);
    let hi = members.iter().map(|m| m.score).fold(f64::NEG_INFINITY, f64::max);
    let mean = members.iter().map(|m| m.score).sum::<f64>() / n;
    (c, mean.max(lo).min(hi))
}

/// Brute-force WBF: sort by (score desc, coordinates asc, view token), then
/// for each box scan every cluster, recompute its fused box from scratch,
/// and join the best one at or above `tau` (earliest on ties).
pub fn reference_wbf(sets: &[PredictionSet], tau: f64) -> Vec<RefCluster> {
    let mut pool: Vec<RefMember> = sets
        .iter()
        .flat_map(|s| {
            s.instances.iter().map(move |i| RefMember {
                view: s.view.token(),
                coords: i.bbox().coords(),
                score: i.score(),
            })
        })
        .collect();
    pool.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| {
                a.coords
                    .iter()
                    .zip(&b.coords)
                    .map(|(x, y)| x.partial_cmp(y).unwrap())
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .then_with(|| a.view.cmp(&b.view))
    });
    let mut clusters: Vec<Vec<RefMember>> = Vec::new();
    for m in pool {
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in clusters.iter().enumerate() {
            let iou = ref_iou(ref_fused(c).0, m.coords);
            if iou >= tau && best.is_none_or(|(_, b)| iou > b) {
                best = Some((i, iou));
            }
        }
        match best {
            Some((i, _)) => clusters[i].push(m),
            None => clusters.push(vec![m]),
        }
    }
    clusters
        .into_iter()
        .map(|members| {
            let (coords, score) = ref_fused(&members);
            RefCluster {
                members,
                coords,
                score,
            }
        })
        .collect()
}

/// 1–6 boxes spread over 1–3 views, drawn around one or two anchors so
/// that clusters form near the IoU threshold. Scores sit on a 0.1 grid to
/// exercise tie-breaking.
pub fn random_wbf_input(rng: &mut ChaCha8Rng) -> Vec<PredictionSet> {
    let views = [AugmentationSpec::Identity, AugmentationSpec::VFlip, AugmentationSpec::HFlip];
    let n_views = rng.gen_range(1..=3);
    let n_boxes = rng.gen_range(1..=6);
    let anchors: Vec<[f64; 4]> = (0..rng.gen_range(1..=2))
        .map(|_| {
            let (x, y) = (rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5));
            [x, y, x + rng.gen_range(0.1..0.4), y + rng.gen_range(0.1..0.4)]
        })
        .collect();
    let mut sets: Vec<PredictionSet> = views[..n_views]
        .iter()
        .map(|v| PredictionSet {
            image_id: 1,
            width: 16,
            height: 16,
            view: *v,
            original_frame: true,
            instances: vec![],
        })
        .collect();
    for _ in 0..n_boxes {
        let a = anchors[rng.gen_range(0..anchors.len())];
        let j = 0.04;
        let c: [f64; 4] = std::array::from_fn(|k| (a[k] + rng.gen_range(-j..j)).clamp(0.0, 1.0));
        let Ok(b) = BBox::new(c[0], c[1], c[2], c[3]) else { continue };
        let score = rng.gen_range(1..=10) as f64 / 10.0;
        let k = rng.gen_range(0..n_views);
        sets[k].instances.push(Instance::new(b, score).unwrap());
    }
    sets
}

/// Random valid box with sides in `[min_side, max_side]`.
pub fn random_box(rng: &mut ChaCha8Rng, min_side: f64, max_side: f64) -> BBox {
    let w = rng.gen_range(min_side..=max_side);
    let h = rng.gen_range(min_side..=max_side);
    let x = rng.gen_range(0.0..=1.0 - w);
    let y = rng.gen_range(0.0..=1.0 - h);
    BBox::new(x, y, x + w, y + h).unwrap()
}

/// Upper-tail probability of at least `k` successes in `n` fair coin flips.
pub fn sign_test_p(k: usize, n: usize) -> f64 {
    let mut p = 0.0;
    for i in k..=n {
        // C(n, i) / 2^n via logs
        let ln_c = ln_factorial(n) - ln_factorial(i) - ln_factorial(n - i);
        p += (ln_c - n as f64 * std::f64::consts::LN_2).exp();
    }
    p.min(1.0)
}

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}
