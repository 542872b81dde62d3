//! Independent reference implementations used by the integration tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use camodet_core::dataset::DifficultyLevel;
use camodet_core::eval::{DetectionRecord, GroundTruthRecord};
use camodet_core::{BBox, Matrix};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::Rng;

// ---- exact box arithmetic ----

fn q(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite coordinate")
}

fn q_overlap(a1: f64, a2: f64, b1: f64, b2: f64) -> BigRational {
    let lo = if a1 > b1 { q(a1) } else { q(b1) };
    let hi = if a2 < b2 { q(a2) } else { q(b2) };
    let d = hi - lo;
    if d > BigRational::zero() {
        d
    } else {
        BigRational::zero()
    }
}

pub struct ExactBox {
    pub intersect: BigRational,
    pub iou: BigRational,
    /// `None` for a zero-area prediction.
    pub coverage: Option<BigRational>,
}

pub fn exact_box(pred: &BBox, gt: &BBox) -> ExactBox {
    let inter =
        q_overlap(pred.x1, pred.x2, gt.x1, gt.x2) * q_overlap(pred.y1, pred.y2, gt.y1, gt.y2);
    let area = |b: &BBox| (q(b.x2) - q(b.x1)) * (q(b.y2) - q(b.y1));
    let (ap, ag) = (area(pred), area(gt));
    let union = &ap + &ag - &inter;
    let iou = if union > BigRational::zero() {
        &inter / &union
    } else {
        BigRational::zero()
    };
    let coverage = (ap > BigRational::zero())
        .then(|| BigRational::from_integer(BigInt::from(1)) - &inter / &ap);
    ExactBox {
        intersect: inter,
        iou,
        coverage,
    }
}

pub fn to_f64(x: &BigRational) -> f64 {
    x.to_f64().expect("representable")
}

/// Boxes with a mix of generic, shared-edge, identical, nested and
/// degenerate configurations.
pub fn random_box_pair<R: Rng>(rng: &mut R) -> (BBox, BBox) {
    let span = |rng: &mut R| {
        let a: f64 = rng.random();
        let b: f64 = rng.random();
        (a.min(b), a.max(b))
    };
    let (ax1, ax2) = span(rng);
    let (ay1, ay2) = span(rng);
    let a = BBox::new(ax1, ay1, ax2, ay2).unwrap();
    let b = match rng.random_range(0..6) {
        0 => a,
        1 => {
            let t: f64 = rng.random_range(0.0..0.5);
            let (w, h) = (a.width(), a.height());
            BBox::new(a.x1 + t * w, a.y1 + t * h, a.x2 - t * w, a.y2 - t * h).unwrap()
        }
        2 => {
            let (y1, y2) = span(rng);
            BBox::new(a.x2, y1, (a.x2 + rng.random_range(0.0..0.3)).min(1.0), y2).unwrap()
        }
        3 => {
            let (x1, x2) = span(rng);
            BBox::new(x1, a.y1, x2, a.y1).unwrap()
        }
        _ => {
            let (x1, x2) = span(rng);
            let (y1, y2) = span(rng);
            BBox::new(x1, y1, x2, y2).unwrap()
        }
    };
    if rng.random_bool(0.5) {
        (a, b)
    } else {
        (b, a)
    }
}

// ---- SVD reference ----

/// Singular values of the row-centered matrix, descending.
pub fn centered_singular_values(t: &Matrix) -> Vec<f64> {
    let (c, _) = t.centered();
    let m = nalgebra::DMatrix::from_row_slice(c.rows(), c.cols(), c.as_slice());
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn frobenius_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

// ---- brute-force evaluator ----

#[derive(Debug, Clone, PartialEq)]
pub struct BruteReport {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub per_class: BTreeMap<u32, [Option<f64>; 3]>,
    pub per_difficulty: BTreeMap<DifficultyLevel, [Option<f64>; 3]>,
}

fn plain_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.width() * a.height() + b.width() * b.height() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Best unclaimed GT with IoU at least `thr` among `candidates`.
fn best_gt(
    det: &BBox,
    gts: &[&GroundTruthRecord],
    candidates: &[usize],
    claimed: &[bool],
    thr: f64,
) -> Option<usize> {
    let mut best = None;
    let mut best_iou = -1.0;
    for &g in candidates {
        if claimed[g] {
            continue;
        }
        let v = plain_iou(det, &gts[g].bbox);
        if v >= thr && v > best_iou {
            best = Some(g);
            best_iou = v;
        }
    }
    best
}

fn brute_class_ap(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    class: u32,
    thr: f64,
    area: Option<(f64, f64)>,
) -> Option<f64> {
    let ignored = |g: &GroundTruthRecord| match area {
        None => false,
        Some((lo, hi)) => g.pixel_area.is_none_or(|a| a < lo || a >= hi),
    };
    let n_pos = gts
        .iter()
        .filter(|g| g.class_index == class && !ignored(g))
        .count();
    if n_pos == 0 {
        return None;
    }
    let images: BTreeSet<&str> = dets
        .iter()
        .map(|d| (d.class_index, d.image_id.as_str()))
        .chain(gts.iter().map(|g| (g.class_index, g.image_id.as_str())))
        .filter(|(c, _)| *c == class)
        .map(|(_, i)| i)
        .collect();
    let mut outcomes: Vec<(f64, bool)> = Vec::new();
    for img in images {
        let mut ds: Vec<&DetectionRecord> = dets
            .iter()
            .filter(|d| d.class_index == class && d.image_id == img)
            .collect();
        ds.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let gs: Vec<&GroundTruthRecord> = gts
            .iter()
            .filter(|g| g.class_index == class && g.image_id == img)
            .collect();
        let normal: Vec<usize> = (0..gs.len()).filter(|&i| !ignored(gs[i])).collect();
        let skipped: Vec<usize> = (0..gs.len()).filter(|&i| ignored(gs[i])).collect();
        let mut claimed = vec![false; gs.len()];
        for d in ds {
            if let Some(g) = best_gt(&d.bbox, &gs, &normal, &claimed, thr) {
                claimed[g] = true;
                outcomes.push((d.confidence, true));
            } else if let Some(g) = best_gt(&d.bbox, &gs, &skipped, &claimed, thr) {
                claimed[g] = true;
            } else {
                outcomes.push((d.confidence, false));
            }
        }
    }
    outcomes.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (k, (_, hit)) in outcomes.iter().enumerate() {
        tp += usize::from(*hit);
        points.push((tp, tp as f64 / (k + 1) as f64));
    }
    let mut total = 0.0;
    for r in 0..=100usize {
        let p = points
            .iter()
            .filter(|(tp, _)| 100 * tp >= r * n_pos)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        total += p;
    }
    Some(total / 101.0)
}

fn thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

fn brute_summary(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    area: Option<(f64, f64)>,
) -> [Option<f64>; 3] {
    let classes: BTreeSet<u32> = dets
        .iter()
        .map(|d| d.class_index)
        .chain(gts.iter().map(|g| g.class_index))
        .collect();
    let per_thr: Vec<Option<f64>> = thresholds()
        .iter()
        .map(|&t| {
            let aps: Vec<f64> = classes
                .iter()
                .filter_map(|&c| brute_class_ap(dets, gts, c, t, area))
                .collect();
            (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
        })
        .collect();
    let ap = per_thr
        .iter()
        .copied()
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64);
    [ap, per_thr[0], per_thr[5]]
}

pub fn brute_evaluate(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    difficulty: &BTreeMap<String, DifficultyLevel>,
) -> BruteReport {
    let [ap, ap50, ap75] = brute_summary(dets, gts, None);
    let with_area = !gts.is_empty() && gts.iter().all(|g| g.pixel_area.is_some());
    let bucket = |lo: f64, hi: f64| {
        if with_area {
            brute_summary(dets, gts, Some((lo, hi)))[0]
        } else {
            None
        }
    };
    let classes: BTreeSet<u32> = dets
        .iter()
        .map(|d| d.class_index)
        .chain(gts.iter().map(|g| g.class_index))
        .collect();
    let per_class = classes
        .iter()
        .map(|&c| {
            let per_thr: Vec<Option<f64>> = thresholds()
                .iter()
                .map(|&t| brute_class_ap(dets, gts, c, t, None))
                .collect();
            let ap = per_thr
                .iter()
                .copied()
                .collect::<Option<Vec<f64>>>()
                .map(|v| v.iter().sum::<f64>() / v.len() as f64);
            (c, [ap, per_thr[0], per_thr[5]])
        })
        .collect();
    let mut per_difficulty = BTreeMap::new();
    for level in DifficultyLevel::ALL {
        let imgs: BTreeSet<&String> = difficulty
            .iter()
            .filter(|(_, l)| **l == level)
            .map(|(i, _)| i)
            .collect();
        if imgs.is_empty() {
            continue;
        }
        let d: Vec<DetectionRecord> = dets
            .iter()
            .filter(|r| imgs.contains(&r.image_id))
            .cloned()
            .collect();
        let g: Vec<GroundTruthRecord> = gts
            .iter()
            .filter(|r| imgs.contains(&r.image_id))
            .cloned()
            .collect();
        per_difficulty.insert(level, brute_summary(&d, &g, None));
    }
    BruteReport {
        ap,
        ap50,
        ap75,
        ap_medium: bucket(32.0 * 32.0, 96.0 * 96.0),
        ap_large: bucket(96.0 * 96.0, f64::INFINITY),
        per_class,
        per_difficulty,
    }
}

/// A toy dataset: up to 5 images and 10 detections, detections mostly near
/// copies of ground truth, continuous confidences.
pub fn toy_dataset<R: Rng>(
    rng: &mut R,
) -> (
    Vec<DetectionRecord>,
    Vec<GroundTruthRecord>,
    BTreeMap<String, DifficultyLevel>,
) {
    let images = rng.random_range(1..=5);
    let classes = rng.random_range(1..=3u32);
    let mut gts = Vec::new();
    let mut difficulty = BTreeMap::new();
    for i in 0..images {
        let id = format!("im{i}");
        difficulty.insert(id.clone(), DifficultyLevel::ALL[rng.random_range(0..3)]);
        for _ in 0..rng.random_range(0..=3) {
            let (x1, y1) = (rng.random_range(0.0..0.6), rng.random_range(0.0..0.6));
            let (w, h) = (rng.random_range(0.05..0.4), rng.random_range(0.05..0.4));
            let b = BBox::new(x1, y1, x1 + w, y1 + h).unwrap();
            let area = rng.random_range(100.0..20000.0);
            gts.push(
                GroundTruthRecord::new(&id, rng.random_range(0..classes), b, Some(area)).unwrap(),
            );
        }
    }
    let mut dets = Vec::new();
    for _ in 0..rng.random_range(0..=10) {
        let conf = rng.random_range(0.01..1.0);
        if !gts.is_empty() && rng.random_bool(0.7) {
            let g = &gts[rng.random_range(0..gts.len())];
            let j = |rng: &mut R, v: f64| (v + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0);
            let (x1, y1, x2, y2) = (
                j(rng, g.bbox.x1),
                j(rng, g.bbox.y1),
                j(rng, g.bbox.x2),
                j(rng, g.bbox.y2),
            );
            let b = BBox::new(x1.min(x2), y1.min(y2), x1.max(x2), y1.max(y2)).unwrap();
            let class = if rng.random_bool(0.9) {
                g.class_index
            } else {
                rng.random_range(0..classes)
            };
            dets.push(DetectionRecord::new(&g.image_id, class, b, conf).unwrap());
        } else {
            let (x1, y1) = (rng.random_range(0.0..0.7), rng.random_range(0.0..0.7));
            let b = BBox::new(
                x1,
                y1,
                x1 + rng.random_range(0.05..0.3),
                y1 + rng.random_range(0.05..0.3),
            )
            .unwrap();
            let id = format!("im{}", rng.random_range(0..images));
            dets.push(DetectionRecord::new(id, rng.random_range(0..classes), b, conf).unwrap());
        }
    }
    (dets, gts, difficulty)
}
