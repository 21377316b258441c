mod common;

use common::*;
use pseudolabel::augment::{AugmentationSpec, PredictionSet};
use pseudolabel::eval::{evaluate, Detections, IouKind};
use pseudolabel::fusion::{wbf, FusionConfig};
use pseudolabel::geometry::{box_iou, mask_iou, mask_to_bbox, BBox, BinaryMask, Instance};
use rand::Rng;

fn bx(c: [f64; 4]) -> BBox {
    BBox::new(c[0], c[1], c[2], c[3]).unwrap()
}

fn pred(c: [f64; 4], s: f64) -> Instance {
    Instance::new(bx(c), s).unwrap()
}

/// COCO-style AP at one threshold: greedy matching in descending score
/// order, precision envelope, sampled at recall points `i / 100`.
fn reference_ap(gt: &[(u64, [f64; 4])], preds: &[(u64, [f64; 4], f64)], t: f64) -> f64 {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].2.partial_cmp(&preds[a].2).unwrap());
    let mut used = vec![false; gt.len()];
    let mut tp = Vec::new();
    for &i in &order {
        let (img, c, _) = preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, (gimg, gc)) in gt.iter().enumerate() {
            if *gimg != img || used[g] {
                continue;
            }
            let iou = ref_iou(c, *gc);
            if iou >= t && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
        }
        tp.push(best.is_some());
    }
    let (mut hits, mut prec, mut rec) = (0usize, Vec::new(), Vec::new());
    for (k, hit) in tp.iter().enumerate() {
        hits += *hit as usize;
        prec.push(hits as f64 / (k + 1) as f64);
        rec.push(hits as f64 / gt.len() as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        if let Some(k) = rec.iter().position(|x| *x >= r) {
            sum += prec[k];
        }
    }
    sum / 101.0
}

fn as_detections(gt: &[(u64, [f64; 4])], preds: &[(u64, [f64; 4], f64)]) -> (Detections, Detections) {
    let mut g = Detections::new();
    let mut p = Detections::new();
    for (id, c) in gt {
        g.entry(*id).or_default().push(Instance::annotation(bx(*c)));
        p.entry(*id).or_default();
    }
    for (id, c, s) in preds {
        g.entry(*id).or_default();
        p.entry(*id).or_default().push(pred(*c, *s));
    }
    (g, p)
}

#[test]
fn hand_pr_table() {
    // ranked TP, FP, TP over 2 GT: precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1.
    // 51 recall points at precision 1 and 50 at 2/3 -> (51 + 100/3) / 101 = 253/303.
    let gt = [(1, [0.0, 0.0, 0.5, 0.5]), (2, [0.5, 0.5, 1.0, 1.0])];
    let preds = [
        (1, [0.0, 0.0, 0.5, 0.5], 0.9),
        (2, [0.0, 0.0, 0.2, 0.2], 0.8),
        (2, [0.5, 0.5, 1.0, 1.0], 0.7),
    ];
    let (g, p) = as_detections(&gt, &preds);
    let r = evaluate(&g, &p, IouKind::Box).unwrap();
    for (_, ap) in &r.per_threshold {
        assert!((ap - 253.0 / 303.0).abs() < 1e-9, "{ap}");
    }
    assert!((r.ap - 253.0 / 303.0).abs() < 1e-9);
}

#[test]
fn hand_pr_table_with_threshold_sweep() {
    // one GT; predictions at IoU 0.8 (s=0.6) and IoU 0.64 (s=0.9).
    // t <= 0.60: the 0.9 one matches first -> AP 1.
    // 0.65 <= t <= 0.80: FP then TP -> precision 1/2 at recall 1 -> AP 0.5.
    // t > 0.80: no match -> 0.
    let gt = [(1, [0.0, 0.0, 1.0, 1.0])];
    let preds = [(1, [0.0, 0.0, 0.8, 1.0], 0.6), (1, [0.0, 0.0, 0.8, 0.8], 0.9)];
    let (g, p) = as_detections(&gt, &preds);
    let r = evaluate(&g, &p, IouKind::Box).unwrap();
    let want = [1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0];
    for ((t, ap), w) in r.per_threshold.iter().zip(want) {
        assert!((ap - w).abs() < 1e-9, "t={t}: {ap} vs {w}");
    }
    assert!((r.ap - 0.5).abs() < 1e-9);
}

#[test]
fn ap_matches_reference_on_random_tables() {
    let mut r = rng(21);
    for _ in 0..300 {
        let n_img = r.gen_range(1..=3u64);
        let mut gt = Vec::new();
        for id in 1..=n_img {
            for _ in 0..r.gen_range(0..=2) {
                gt.push((id, random_box(&mut r, 0.1, 0.6).coords()));
            }
        }
        if gt.is_empty() {
            gt.push((1, random_box(&mut r, 0.1, 0.6).coords()));
        }
        let mut preds = Vec::new();
        for _ in 0..r.gen_range(0..=10) {
            let id = r.gen_range(1..=n_img);
            let c = match gt.iter().find(|g| g.0 == id) {
                Some((_, g)) if r.gen_bool(0.7) => {
                    let d: [f64; 4] = std::array::from_fn(|k| (g[k] + r.gen_range(-0.08..0.08)).clamp(0.0, 1.0));
                    match BBox::new(d[0], d[1], d[2], d[3]) {
                        Ok(b) => b.coords(),
                        Err(_) => *g,
                    }
                }
                _ => random_box(&mut r, 0.1, 0.6).coords(),
            };
            // distinct scores keep the ranking unambiguous
            preds.push((id, c, (preds.len() as f64 + r.gen_range(0.0..0.5)) / 11.0));
        }
        let (g, p) = as_detections(&gt, &preds);
        let res = evaluate(&g, &p, IouKind::Box).unwrap();
        for (t, ap) in &res.per_threshold {
            let want = reference_ap(&gt, &preds, *t);
            assert!((ap - want).abs() < 1e-9, "t={t}: {ap} vs {want}");
        }
    }
}

#[test]
fn box_iou_examples() {
    let a = bx([0.0, 0.0, 0.2, 0.2]);
    let b = bx([0.1, 0.1, 0.3, 0.3]);
    assert!((box_iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    let c = bx([0.1, 0.2, 0.4, 0.5]);
    assert_eq!(box_iou(&c, &c), 1.0);
    assert_eq!(box_iou(&bx([0.0, 0.0, 0.1, 0.1]), &bx([0.5, 0.5, 0.6, 0.6])), 0.0);
}

#[test]
fn box_iou_matches_closed_form_reference() {
    let mut r = rng(22);
    for _ in 0..2000 {
        let (a, b) = (random_box(&mut r, 1e-3, 1.0), random_box(&mut r, 1e-3, 1.0));
        let want = ref_iou(a.coords(), b.coords());
        assert!((box_iou(&a, &b) - want).abs() < 1e-12);
    }
}

fn count_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for (x, y) in a.data().iter().zip(b.data()) {
        inter += (*x && *y) as u64;
        union += (*x || *y) as u64;
    }
    inter as f64 / union as f64
}

#[test]
fn mask_iou_matches_pixel_count() {
    let rows = |lo: u32, hi: u32| BinaryMask::from_fn(4, 4, |_, y| (lo..=hi).contains(&y)).unwrap();
    assert_eq!(mask_iou(&rows(0, 2), &rows(1, 3)).unwrap(), 0.5);
    let halves = (
        BinaryMask::from_fn(4, 4, |x, _| x < 2).unwrap(),
        BinaryMask::from_fn(4, 4, |x, _| x >= 2).unwrap(),
    );
    assert_eq!(mask_iou(&halves.0, &halves.1).unwrap(), 0.0);
    assert!(mask_iou(&BinaryMask::new(3, 3).unwrap(), &BinaryMask::new(3, 3).unwrap()).is_err());

    let mut r = rng(23);
    for _ in 0..500 {
        let (w, h) = (r.gen_range(1..20), r.gen_range(1..20));
        let (pa, pb) = (r.gen_range(0.05..0.9), r.gen_range(0.05..0.9));
        let mut a = BinaryMask::from_fn(w, h, |_, _| r.gen_bool(pa)).unwrap();
        let b = BinaryMask::from_fn(w, h, |_, _| r.gen_bool(pb)).unwrap();
        a.set(0, 0, true);
        assert_eq!(mask_iou(&a, &b).unwrap(), count_iou(&a, &b));
    }
}

#[test]
fn mask_to_bbox_examples() {
    let mut m = BinaryMask::new(10, 10).unwrap();
    m.set(3, 4, true);
    assert_eq!(mask_to_bbox(&m).unwrap(), bx([0.3, 0.4, 0.4, 0.5]));
    let full = BinaryMask::from_fn(10, 10, |_, _| true).unwrap();
    assert_eq!(mask_to_bbox(&full).unwrap(), bx([0.0, 0.0, 1.0, 1.0]));
    let block = BinaryMask::from_fn(10, 10, |x, y| (5..=9).contains(&x) && (2..=4).contains(&y)).unwrap();
    assert_eq!(mask_to_bbox(&block).unwrap(), bx([0.5, 0.2, 1.0, 0.5]));
}

#[test]
fn wbf_matches_reference_on_larger_trials() {
    let cfg = FusionConfig::new(0.55, 0.5).unwrap();
    let mut r = rng(24);
    for _ in 0..3000 {
        let sets = random_wbf_input(&mut r);
        let got = wbf(&sets, &cfg).unwrap();
        let want = reference_wbf(&sets, 0.55);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g.fused.bbox().coords(), w.coords);
            assert_eq!(g.fused.score(), w.score);
            let views: Vec<String> = g.members.iter().map(|m| m.view.token()).collect();
            let ref_views: Vec<String> = w.members.iter().map(|m| m.view.clone()).collect();
            assert_eq!(views, ref_views);
        }
    }
}

#[test]
fn wbf_examples() {
    let set = |insts: Vec<Instance>| {
        vec![PredictionSet {
            image_id: 1,
            width: 8,
            height: 8,
            view: AugmentationSpec::Identity,
            original_frame: true,
            instances: insts,
        }]
    };
    let cfg = FusionConfig::default();
    let out = wbf(&set(vec![pred([0.1, 0.1, 0.5, 0.5], 0.9), pred([0.2, 0.2, 0.6, 0.6], 0.3)]), &cfg).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].fused, pred([0.1, 0.1, 0.5, 0.5], 0.9));
    assert_eq!(out[1].fused, pred([0.2, 0.2, 0.6, 0.6], 0.3));

    let single = pred([0.3, 0.1, 0.7, 0.2], 0.42);
    let out = wbf(&set(vec![single.clone()]), &cfg).unwrap();
    assert_eq!(out[0].fused, single);
}
