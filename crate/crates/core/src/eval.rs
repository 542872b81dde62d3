//! COCO-style box AP: greedy matching, 101-point interpolated precision,
//! IoU thresholds 0.50:0.05:0.95 and medium/large pixel-area buckets.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::{iou, BBox};
use crate::dataset::DifficultyLevel;
use crate::error::{Error, Result};

pub const NUM_IOU_THRESHOLDS: usize = 10;
pub const RECALL_POINTS: usize = 101;
/// Pixel-area edges of the medium bucket, `[32², 96²)`.
pub const MEDIUM_AREA: (f64, f64) = (32.0 * 32.0, 96.0 * 96.0);

pub const PROTOCOL: &str =
    "AP = mean over IoU 0.50:0.05:0.95 of the class-mean 101-point interpolated AP; medium = pixel area in [32^2, 96^2), large >= 96^2";

/// `0.50, 0.55, …, 0.95`, each computed as an exact ratio of integers.
pub fn iou_thresholds() -> [f64; NUM_IOU_THRESHOLDS] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class_index: u32,
    pub bbox: BBox,
    pub confidence: f64,
}

impl DetectionRecord {
    pub fn new(
        image_id: impl Into<String>,
        class_index: u32,
        bbox: BBox,
        confidence: f64,
    ) -> Result<Self> {
        bbox.validate()?;
        if !(confidence.is_finite() && (0.0..=1.0).contains(&confidence)) {
            return Err(Error::validation(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Self {
            image_id: image_id.into(),
            class_index,
            bbox,
            confidence,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub image_id: String,
    pub class_index: u32,
    pub bbox: BBox,
    pub pixel_area: Option<f64>,
}

impl GroundTruthRecord {
    pub fn new(
        image_id: impl Into<String>,
        class_index: u32,
        bbox: BBox,
        pixel_area: Option<f64>,
    ) -> Result<Self> {
        bbox.validate()?;
        if let Some(a) = pixel_area {
            if !(a.is_finite() && a >= 0.0) {
                return Err(Error::validation(format!(
                    "pixel area {a} must be finite and non-negative"
                )));
            }
        }
        Ok(Self {
            image_id: image_id.into(),
            class_index,
            bbox,
            pixel_area,
        })
    }
}

fn cmp_f64(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

/// Confidence descending, then box area ascending. Stable sorts with this
/// key leave input order as the last tie-break.
fn detection_rank(a: &DetectionRecord, b: &DetectionRecord) -> Ordering {
    cmp_f64(b.confidence, a.confidence).then_with(|| cmp_f64(a.bbox.area(), b.bbox.area()))
}

/// Greedy matching with ignore flags on the ground truth. Returns, per
/// detection in ranked order, its input index and the matched GT index.
/// A detection prefers unignored GTs: once it holds an unignored candidate
/// it never moves to an ignored one. Among equal IoUs the first GT wins.
fn greedy_match(
    dets: &[&DetectionRecord],
    gts: &[&GroundTruthRecord],
    ignored: &[bool],
    threshold: f64,
) -> Vec<(usize, Option<usize>)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| detection_rank(dets[a], dets[b]));
    let mut gt_order: Vec<usize> = (0..gts.len()).collect();
    gt_order.sort_by_key(|&g| ignored[g]);
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for &g in &gt_order {
                if taken[g] {
                    continue;
                }
                if let Some((m, _)) = best {
                    if !ignored[m] && ignored[g] {
                        break;
                    }
                }
                let v = iou(&dets[d].bbox, &gts[g].bbox);
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            let m = best.map(|(g, _)| g);
            if let Some(g) = m {
                taken[g] = true;
            }
            (d, m)
        })
        .collect()
}

/// Matches one (image, class) group. Output is in ranked order: detection
/// index into `dets` and the GT index it claimed, if any.
pub fn match_detections(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    iou_threshold: f64,
) -> Vec<(usize, Option<usize>)> {
    let d: Vec<&DetectionRecord> = dets.iter().collect();
    let g: Vec<&GroundTruthRecord> = gts.iter().collect();
    greedy_match(&d, &g, &vec![false; gts.len()], iou_threshold)
}

/// 101-point interpolated AP of a TP/FP sequence already ordered by
/// confidence. `None` when there is no ground truth.
pub fn average_precision(tp: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let total: f64 = (0..RECALL_POINTS)
        .map(|r| {
            let level = r as f64 / (RECALL_POINTS - 1) as f64;
            let idx = recall.partition_point(|&x| x < level);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    Some(total / RECALL_POINTS as f64)
}

#[derive(Debug, Clone, Default)]
pub struct EvalConfig {
    /// Image-level difficulty used for the per-difficulty table.
    pub difficulty: BTreeMap<String, DifficultyLevel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class_index: u32,
    pub num_gt: usize,
    pub num_detections: usize,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRow {
    pub level: DifficultyLevel,
    pub num_images: usize,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub per_class: Vec<ClassRow>,
    pub per_difficulty: Vec<DifficultyRow>,
}

#[derive(Clone, Copy)]
enum Bucket {
    All,
    Area(f64, f64),
}

impl Bucket {
    fn ignores(self, gt: &GroundTruthRecord) -> bool {
        match self {
            Bucket::All => false,
            Bucket::Area(lo, hi) => gt.pixel_area.is_none_or(|a| a < lo || a >= hi),
        }
    }
}

/// Records grouped by class, then image, in canonical order.
struct Grouped<'a> {
    classes: BTreeSet<u32>,
    dets: BTreeMap<(u32, &'a str), Vec<&'a DetectionRecord>>,
    gts: BTreeMap<(u32, &'a str), Vec<&'a GroundTruthRecord>>,
}

fn group<'a>(dets: &'a [DetectionRecord], gts: &'a [GroundTruthRecord]) -> Grouped<'a> {
    let mut g = Grouped {
        classes: BTreeSet::new(),
        dets: BTreeMap::new(),
        gts: BTreeMap::new(),
    };
    for d in dets {
        g.classes.insert(d.class_index);
        g.dets
            .entry((d.class_index, d.image_id.as_str()))
            .or_default()
            .push(d);
    }
    for t in gts {
        g.classes.insert(t.class_index);
        g.gts
            .entry((t.class_index, t.image_id.as_str()))
            .or_default()
            .push(t);
    }
    let key = |b: &BBox| [b.x1, b.y1, b.x2, b.y2];
    for v in g.dets.values_mut() {
        v.sort_by(|a, b| {
            detection_rank(a, b).then_with(|| {
                key(&a.bbox)
                    .partial_cmp(&key(&b.bbox))
                    .unwrap_or(Ordering::Equal)
            })
        });
    }
    for v in g.gts.values_mut() {
        v.sort_by(|a, b| {
            key(&a.bbox)
                .partial_cmp(&key(&b.bbox))
                .unwrap_or(Ordering::Equal)
                .then_with(|| cmp_f64(a.pixel_area.unwrap_or(-1.0), b.pixel_area.unwrap_or(-1.0)))
        });
    }
    g
}

fn class_ap(g: &Grouped, class: u32, threshold: f64, bucket: Bucket) -> Option<f64> {
    let images: BTreeSet<&str> = g
        .dets
        .keys()
        .chain(g.gts.keys())
        .filter(|(c, _)| *c == class)
        .map(|(_, i)| *i)
        .collect();
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut num_gt = 0;
    for img in images {
        let dets = g.dets.get(&(class, img)).map(Vec::as_slice).unwrap_or(&[]);
        let gts = g.gts.get(&(class, img)).map(Vec::as_slice).unwrap_or(&[]);
        let ignored: Vec<bool> = gts.iter().map(|t| bucket.ignores(t)).collect();
        num_gt += ignored.iter().filter(|&&i| !i).count();
        for (d, m) in greedy_match(dets, gts, &ignored, threshold) {
            match m {
                Some(t) if ignored[t] => {}
                Some(_) => scored.push((dets[d].confidence, true)),
                None => scored.push((dets[d].confidence, false)),
            }
        }
    }
    scored.sort_by(|a, b| cmp_f64(b.0, a.0));
    let tp: Vec<bool> = scored.into_iter().map(|(_, t)| t).collect();
    average_precision(&tp, num_gt)
}

fn mean(vals: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = vals.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Class-mean AP at each threshold; `None` where no class has ground truth.
fn threshold_means(g: &Grouped, bucket: Bucket) -> Vec<Option<f64>> {
    iou_thresholds()
        .iter()
        .map(|&t| mean(g.classes.iter().filter_map(|&c| class_ap(g, c, t, bucket))))
        .collect()
}

fn summary(means: &[Option<f64>]) -> (Option<f64>, Option<f64>, Option<f64>) {
    let ap = if means.iter().all(Option::is_some) {
        mean(means.iter().flatten().copied())
    } else {
        None
    };
    (ap, means[0], means[5])
}

pub fn evaluate(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    config: &EvalConfig,
) -> EvalReport {
    let g = group(dets, gts);
    let (ap, ap50, ap75) = summary(&threshold_means(&g, Bucket::All));
    let has_areas = !gts.is_empty() && gts.iter().all(|t| t.pixel_area.is_some());
    let bucket_ap = |lo: f64, hi: f64| {
        if has_areas {
            summary(&threshold_means(&g, Bucket::Area(lo, hi))).0
        } else {
            None
        }
    };
    let ap_medium = bucket_ap(MEDIUM_AREA.0, MEDIUM_AREA.1);
    let ap_large = bucket_ap(MEDIUM_AREA.1, f64::INFINITY);

    let thresholds = iou_thresholds();
    let per_class = g
        .classes
        .iter()
        .map(|&c| {
            let aps: Vec<Option<f64>> = thresholds
                .iter()
                .map(|&t| class_ap(&g, c, t, Bucket::All))
                .collect();
            let (ap, ap50, ap75) = summary(&aps);
            ClassRow {
                class_index: c,
                num_gt: gts.iter().filter(|t| t.class_index == c).count(),
                num_detections: dets.iter().filter(|d| d.class_index == c).count(),
                ap,
                ap50,
                ap75,
            }
        })
        .collect();

    let mut per_difficulty = Vec::new();
    for level in DifficultyLevel::ALL {
        let images: BTreeSet<&str> = config
            .difficulty
            .iter()
            .filter(|(_, &l)| l == level)
            .map(|(i, _)| i.as_str())
            .collect();
        if images.is_empty() {
            continue;
        }
        let d: Vec<DetectionRecord> = dets
            .iter()
            .filter(|r| images.contains(r.image_id.as_str()))
            .cloned()
            .collect();
        let t: Vec<GroundTruthRecord> = gts
            .iter()
            .filter(|r| images.contains(r.image_id.as_str()))
            .cloned()
            .collect();
        let sub = group(&d, &t);
        let (ap, ap50, ap75) = summary(&threshold_means(&sub, Bucket::All));
        per_difficulty.push(DifficultyRow {
            level,
            num_images: images.len(),
            ap,
            ap50,
            ap75,
        });
    }

    EvalReport {
        protocol: PROTOCOL.to_owned(),
        ap,
        ap50,
        ap75,
        ap_medium,
        ap_large,
        per_class,
        per_difficulty,
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then(|| (i + 1, l.split_whitespace().collect()))
    })
}

fn field<T: std::str::FromStr>(parts: &[&str], idx: usize, line: usize, name: &str) -> Result<T> {
    parts[idx].parse().map_err(|_| Error::Parse {
        line,
        message: format!("{name} `{}` is not valid", parts[idx]),
    })
}

fn parse_box(parts: &[&str], line: usize) -> Result<BBox> {
    let c: [f64; 4] = [
        field(parts, 2, line, "x1")?,
        field(parts, 3, line, "y1")?,
        field(parts, 4, line, "x2")?,
        field(parts, 5, line, "y2")?,
    ];
    BBox::new(c[0], c[1], c[2], c[3]).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })
}

/// `image_id class_index x1 y1 x2 y2 confidence` per line.
pub fn parse_detections(text: &str) -> Result<Vec<DetectionRecord>> {
    data_lines(text)
        .map(|(line, p)| {
            if p.len() != 7 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 7 fields, found {}", p.len()),
                });
            }
            let bbox = parse_box(&p, line)?;
            DetectionRecord::new(
                p[0],
                field(&p, 1, line, "class index")?,
                bbox,
                field(&p, 6, line, "confidence")?,
            )
            .map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })
        })
        .collect()
}

/// `image_id class_index x1 y1 x2 y2 [pixel_area]` per line.
pub fn parse_ground_truth(text: &str) -> Result<Vec<GroundTruthRecord>> {
    data_lines(text)
        .map(|(line, p)| {
            if p.len() != 6 && p.len() != 7 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 6 or 7 fields, found {}", p.len()),
                });
            }
            let bbox = parse_box(&p, line)?;
            let area = if p.len() == 7 {
                Some(field(&p, 6, line, "pixel area")?)
            } else {
                None
            };
            GroundTruthRecord::new(p[0], field(&p, 1, line, "class index")?, bbox, area).map_err(
                |e| Error::Parse {
                    line,
                    message: e.to_string(),
                },
            )
        })
        .collect()
}

/// `image_id level` per line, level one of mild, moderate, severe.
pub fn parse_difficulty(text: &str) -> Result<BTreeMap<String, DifficultyLevel>> {
    data_lines(text)
        .map(|(line, p)| {
            if p.len() != 2 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 2 fields, found {}", p.len()),
                });
            }
            let level = DifficultyLevel::ALL
                .into_iter()
                .find(|l| l.name() == p[1])
                .ok_or_else(|| Error::Parse {
                    line,
                    message: format!("unknown difficulty `{}`", p[1]),
                })?;
            Ok((p[0].to_owned(), level))
        })
        .collect()
}

pub fn format_detections(dets: &[DetectionRecord]) -> String {
    dets.iter()
        .map(|d| {
            format!(
                "{} {} {} {} {} {} {}\n",
                d.image_id, d.class_index, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.confidence
            )
        })
        .collect()
}

pub fn format_ground_truth(gts: &[GroundTruthRecord]) -> String {
    gts.iter()
        .map(|t| {
            let area = t.pixel_area.map(|a| format!(" {a}")).unwrap_or_default();
            format!(
                "{} {} {} {} {} {}{area}\n",
                t.image_id, t.class_index, t.bbox.x1, t.bbox.y1, t.bbox.x2, t.bbox.y2
            )
        })
        .collect()
}

fn read_with<T>(path: &Path, parse: impl Fn(&str) -> Result<T>) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    read_with(path, parse_detections)
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruthRecord>> {
    read_with(path, parse_ground_truth)
}

pub fn read_difficulty(path: &Path) -> Result<BTreeMap<String, DifficultyLevel>> {
    read_with(path, parse_difficulty)
}
