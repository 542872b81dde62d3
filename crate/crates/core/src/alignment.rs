//! Box geometry, specificity-region selection and the coverage loss.
//!
//! For every refined sub-description the region embedding most similar to it
//! is its *specific region*. When the externally assigned positive region for
//! an object is that same region, the object's predicted box becomes an
//! alignment sample and is penalised by how much of it lies outside the
//! ground-truth box.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine, norm, Matrix, NORM_EPS};

/// Axis-aligned box in normalized image coordinates, corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
            && self.x1 <= self.x2
            && self.y1 <= self.y2;
        if ok {
            Ok(())
        } else {
            Err(Error::validation(format!(
                "invalid box [{}, {}, {}, {}]",
                self.x1, self.y1, self.x2, self.y2
            )))
        }
    }

    /// Builds a box from YOLO center form, clamping the corners to `[0, 1]`.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) || w < 0.0 || h < 0.0 {
            return Err(Error::validation(format!(
                "invalid center-form box ({cx}, {cy}, {w}, {h})"
            )));
        }
        let c = |v: f64| v.clamp(0.0, 1.0);
        Self::new(
            c(cx - w / 2.0),
            c(cy - h / 2.0),
            c(cx + w / 2.0),
            c(cy + h / 2.0),
        )
    }

    /// `(x_center, y_center, width, height)`
    pub fn to_center(&self) -> (f64, f64, f64, f64) {
        (
            (self.x1 + self.x2) / 2.0,
            (self.y1 + self.y2) / 2.0,
            self.width(),
            self.height(),
        )
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }
}

#[inline]
fn overlap(a1: f64, a2: f64, b1: f64, b2: f64) -> f64 {
    (a2.min(b2) - a1.max(b1)).max(0.0)
}

pub fn intersect_area(a: &BBox, b: &BBox) -> f64 {
    overlap(a.x1, a.x2, b.x1, b.x2) * overlap(a.y1, a.y2, b.y1, b.y2)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersect_area(a, b);
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// `1 − |pred ∩ gt| / |pred|`. Not symmetric in its arguments.
pub fn coverage_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    let area = pred.area();
    if !(area > 0.0) {
        return Err(Error::degenerate("coverage loss of a zero-area prediction"));
    }
    Ok((1.0 - intersect_area(pred, gt) / area).clamp(0.0, 1.0))
}

/// Analytic gradient of [`coverage_loss`] with respect to the predicted
/// corners `[x1, y1, x2, y2]`.
///
/// The loss is piecewise smooth; where a predicted edge sits exactly on a
/// ground-truth edge, or the overlap is exactly zero, the one-sided
/// derivative that keeps the overlap term constant is returned.
pub fn coverage_loss_grad(pred: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    let (w, h) = (pred.width(), pred.height());
    let area = w * h;
    if !(area > 0.0) {
        return Err(Error::degenerate("coverage loss of a zero-area prediction"));
    }
    let ox = overlap(pred.x1, pred.x2, gt.x1, gt.x2);
    let oy = overlap(pred.y1, pred.y2, gt.y1, gt.y2);
    let inter = ox * oy;

    // d(overlap)/d(edge): the inner edge of the overlap moves with the
    // prediction only when the prediction's edge is the binding one.
    let dox_dx1 = if ox > 0.0 && pred.x1 > gt.x1 {
        -1.0
    } else {
        0.0
    };
    let dox_dx2 = if ox > 0.0 && pred.x2 < gt.x2 {
        1.0
    } else {
        0.0
    };
    let doy_dy1 = if oy > 0.0 && pred.y1 > gt.y1 {
        -1.0
    } else {
        0.0
    };
    let doy_dy2 = if oy > 0.0 && pred.y2 < gt.y2 {
        1.0
    } else {
        0.0
    };

    let d_inter = [dox_dx1 * oy, doy_dy1 * ox, dox_dx2 * oy, doy_dy2 * ox];
    let d_area = [-h, -w, h, w];
    let mut g = [0.0; 4];
    for i in 0..4 {
        g[i] = -(d_inter[i] * area - inter * d_area[i]) / (area * area);
    }
    Ok(g)
}

/// Region embeddings of one image and their cached mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingField {
    embeddings: Matrix,
    mean: Vec<f64>,
}

impl EmbeddingField {
    pub fn new(embeddings: Matrix) -> Result<Self> {
        if embeddings.rows() == 0 {
            return Err(Error::validation(
                "an embedding field needs at least one region",
            ));
        }
        let mean = embeddings.row_mean();
        Ok(Self { embeddings, mean })
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn region(&self, i: usize) -> &[f64] {
        self.embeddings.row(i)
    }

    /// The image-average embedding.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    /// Weight of the coverage term.
    pub lambda: f64,
    pub similarity: Similarity,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            similarity: Similarity::Cosine,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::validation(format!(
                "coverage weight must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Index of the region most cosine-similar to `refined`; lowest index wins
/// ties. Zero-norm regions are never selected.
pub fn select_specific_region(field: &EmbeddingField, refined: &[f64]) -> Result<usize> {
    if refined.len() != field.dim() {
        return Err(Error::validation(format!(
            "sub-description dim {} does not match region dim {}",
            refined.len(),
            field.dim()
        )));
    }
    if !(norm(refined) > NORM_EPS) {
        return Err(Error::degenerate("refined sub-description has zero norm"));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in field.embeddings().row_iter().enumerate() {
        if !(norm(v) > NORM_EPS) {
            continue;
        }
        let s = cosine(v, refined)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::degenerate("every region embedding has zero norm"))
}

/// True iff the assigned positive region is the specific region.
#[inline]
pub fn alignment_gate(positive_index: usize, specific_index: usize) -> bool {
    positive_index == specific_index
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoveragePair {
    pub pred: BBox,
    pub gt: BBox,
    pub gated: bool,
}

/// `λ · mean(coverage_loss)` over the gated pairs; zero when nothing is gated
/// or `λ = 0`.
pub fn batch_coverage_term(pairs: &[CoveragePair], cfg: &AlignmentConfig) -> Result<f64> {
    cfg.validate()?;
    if cfg.lambda == 0.0 {
        return Ok(0.0);
    }
    let losses = pairs
        .iter()
        .filter(|p| p.gated)
        .map(|p| coverage_loss(&p.pred, &p.gt))
        .collect::<Result<Vec<_>>>()?;
    if losses.is_empty() {
        return Ok(0.0);
    }
    Ok(cfg.lambda * pairwise_sum(&losses) / losses.len() as f64)
}

fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Per sub-description alignment decision for one object of one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentDecision {
    pub sub_description: usize,
    pub specific_index: usize,
    pub gated: bool,
}

/// Evaluates the gate for every refined sub-description `k` of a class.
pub fn alignment_decisions(
    field: &EmbeddingField,
    refined: &Matrix,
    positive_index: usize,
) -> Result<Vec<AlignmentDecision>> {
    if positive_index >= field.len() {
        return Err(Error::validation(format!(
            "positive index {positive_index} out of range for {} regions",
            field.len()
        )));
    }
    refined
        .row_iter()
        .enumerate()
        .map(|(k, t)| {
            let specific_index = select_specific_region(field, t)?;
            Ok(AlignmentDecision {
                sub_description: k,
                specific_index,
                gated: alignment_gate(positive_index, specific_index),
            })
        })
        .collect()
}
