//! Sub-description fusion.
//!
//! A class arrives as `K` unit-norm sub-description embeddings. They are
//! decorrelated by a truncated SVD of the centered set, passed row by row
//! through a three-layer adapter, and then fused into a single class vector.
//! The contrastive fusion weights each refined sub-description by how much
//! closer it is to a region embedding than to the image-average embedding.
//! Sum-normalize and Gram–Schmidt ("orthogonal") fusions are kept as the
//! ablation baselines.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    axpy, cosine, dot, norm, sigmoid, softmax, svd_truncate, Affine, Matrix, NORM_EPS,
};

/// Rows whose residual falls below this norm are dropped by Gram–Schmidt.
pub const GS_DROP_TOL: f64 = 1e-10;

/// Ingestion tolerance on the unit-norm row invariant.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// The `K` sub-description embeddings of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubDescriptionSet {
    pub class_id: u32,
    pub labels: Vec<String>,
    embeddings: Matrix,
}

impl SubDescriptionSet {
    /// Builds a set, normalizing every row to unit length.
    ///
    /// `labels` may be empty (no sidecar available); otherwise it must hold one
    /// string per row.
    pub fn new(class_id: u32, labels: Vec<String>, embeddings: Matrix) -> Result<Self> {
        if embeddings.rows() == 0 {
            return Err(Error::validation(format!(
                "class {class_id}: a sub-description set needs at least one row"
            )));
        }
        if !labels.is_empty() && labels.len() != embeddings.rows() {
            return Err(Error::validation(format!(
                "class {class_id}: {} labels for {} embeddings",
                labels.len(),
                embeddings.rows()
            )));
        }
        let mut embeddings = embeddings;
        for k in 0..embeddings.rows() {
            let row = embeddings.row_mut(k);
            let n = norm(row);
            if !(n > NORM_EPS) {
                return Err(Error::degenerate(format!(
                    "class {class_id}: sub-description {k} has zero norm"
                )));
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        Ok(Self {
            class_id,
            labels,
            embeddings,
        })
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
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

/// Sub-descriptions after decorrelation and the adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedSubDescriptions {
    pub class_id: u32,
    pub embeddings: Matrix,
}

/// Bounds on the number of retained principal directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SvdRank {
    pub min: usize,
    pub max: usize,
}

impl Default for SvdRank {
    fn default() -> Self {
        Self { min: 3, max: 10 }
    }
}

impl SvdRank {
    pub fn validate(&self) -> Result<()> {
        if self.min == 0 || self.min > self.max {
            return Err(Error::validation(format!(
                "svd rank bounds need 1 <= min <= max, got min={} max={}",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

/// Truncated-SVD decorrelation of a sub-description set.
///
/// The retained rank is `clamp(K, min, max)`. Sets smaller than `min` are
/// returned unchanged.
pub fn decorrelate(set: &SubDescriptionSet, rank: SvdRank) -> Result<Matrix> {
    rank.validate()?;
    let k = set.len();
    if k < rank.min {
        return Ok(set.embeddings().clone());
    }
    svd_truncate(set.embeddings(), k.clamp(rank.min, rank.max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Sigmoid,
    Tanh,
    #[default]
    Silu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Silu => x * sigmoid(x),
        }
    }

    /// Derivative with respect to the pre-activation `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

/// Three affine layers `D → H → H → D`; the activation is applied after the
/// first two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub layers: [Affine; 3],
    pub activation: Activation,
}

impl AdapterParams {
    pub fn new(layers: [Affine; 3], activation: Activation) -> Result<Self> {
        let params = Self { layers, activation };
        params.validate()?;
        Ok(params)
    }

    /// Square identity layers with an identity activation: the adapter is a
    /// no-op. This is also the untrained adapter used by the benchmark.
    pub fn identity(dim: usize) -> Self {
        Self {
            layers: [
                Affine::identity(dim),
                Affine::identity(dim),
                Affine::identity(dim),
            ],
            activation: Activation::Identity,
        }
    }

    pub fn random<R: Rng + ?Sized>(
        dim: usize,
        hidden: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            layers: [
                Affine::random(hidden, dim, rng),
                Affine::random(hidden, hidden, rng),
                Affine::random(dim, hidden, rng),
            ],
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [l1, l2, l3] = &self.layers;
        if l1.out_dim() != l2.in_dim() || l2.out_dim() != l3.in_dim() {
            return Err(Error::validation(format!(
                "adapter layers do not chain: {}→{}, {}→{}, {}→{}",
                l1.in_dim(),
                l1.out_dim(),
                l2.in_dim(),
                l2.out_dim(),
                l3.in_dim(),
                l3.out_dim()
            )));
        }
        if l1.in_dim() != l3.out_dim() {
            return Err(Error::validation(format!(
                "adapter maps {} to {}; input and output dims must match",
                l1.in_dim(),
                l3.out_dim()
            )));
        }
        for l in &self.layers {
            if l.weight.rows() != l.bias.len() {
                return Err(Error::validation("adapter bias length mismatch"));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Parameters flattened as `[W1, b1, W2, b2, W3, b3]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat) keeping this adapter's shapes.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), self.num_params());
        let mut out = self.clone();
        let mut at = 0;
        for l in out.layers.iter_mut() {
            let n = l.weight.as_slice().len();
            l.weight.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
            let m = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + m]);
            at += m;
        }
        out
    }
}

struct AdapterTrace {
    pre1: Vec<f64>,
    h1: Vec<f64>,
    pre2: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
}

fn adapter_trace(params: &AdapterParams, t: &[f64]) -> Result<AdapterTrace> {
    if t.len() != params.dim() {
        return Err(Error::validation(format!(
            "adapter expects dim {}, got {}",
            params.dim(),
            t.len()
        )));
    }
    let act = params.activation;
    let pre1 = params.layers[0].forward(t);
    let h1: Vec<f64> = pre1.iter().map(|&x| act.apply(x)).collect();
    let pre2 = params.layers[1].forward(&h1);
    let h2: Vec<f64> = pre2.iter().map(|&x| act.apply(x)).collect();
    let out = params.layers[2].forward(&h2);
    Ok(AdapterTrace {
        pre1,
        h1,
        pre2,
        h2,
        out,
    })
}

pub fn adapter_forward(params: &AdapterParams, t: &[f64]) -> Result<Vec<f64>> {
    Ok(adapter_trace(params, t)?.out)
}

/// Gradients of a scalar loss with respect to every adapter parameter and the
/// input, given `∂L/∂output`.
#[derive(Debug, Clone)]
pub struct AdapterGrads {
    /// Same layout as [`AdapterParams::to_flat`].
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

pub fn adapter_backward(
    params: &AdapterParams,
    t: &[f64],
    grad_out: &[f64],
) -> Result<AdapterGrads> {
    let tr = adapter_trace(params, t)?;
    if grad_out.len() != tr.out.len() {
        return Err(Error::validation(
            "adapter output gradient has the wrong length",
        ));
    }
    let act = params.activation;
    let [l1, l2, l3] = &params.layers;

    let g3 = grad_out.to_vec();
    let gh2 = l3.weight.matvec_t(&g3);
    let g2: Vec<f64> = gh2
        .iter()
        .zip(&tr.pre2)
        .map(|(g, &p)| g * act.derivative(p))
        .collect();
    let gh1 = l2.weight.matvec_t(&g2);
    let g1: Vec<f64> = gh1
        .iter()
        .zip(&tr.pre1)
        .map(|(g, &p)| g * act.derivative(p))
        .collect();
    let input = l1.weight.matvec_t(&g1);

    let mut flat = Vec::with_capacity(params.num_params());
    for (delta, x) in [(&g1, t), (&g2, &tr.h1[..]), (&g3, &tr.h2[..])] {
        for &d in delta.iter() {
            flat.extend(x.iter().map(|xi| d * xi));
        }
        flat.extend_from_slice(delta);
    }
    Ok(AdapterGrads {
        params: flat,
        input,
    })
}

/// Applies the adapter to every row of a decorrelated matrix.
pub fn adapt_rows(
    params: &AdapterParams,
    class_id: u32,
    decorrelated: &Matrix,
) -> Result<RefinedSubDescriptions> {
    let rows = decorrelated
        .row_iter()
        .map(|r| adapter_forward(params, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(RefinedSubDescriptions {
        class_id,
        embeddings: Matrix::from_rows(&rows)?,
    })
}

/// Decorrelate, then adapt.
pub fn refine(
    set: &SubDescriptionSet,
    rank: SvdRank,
    adapter: &AdapterParams,
) -> Result<RefinedSubDescriptions> {
    let decorrelated = decorrelate(set, rank)?;
    adapt_rows(adapter, set.class_id, &decorrelated)
}

/// Raw contrastive scores and their softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub raw_scores: Vec<f64>,
    pub normalized: Vec<f64>,
    /// Refined rows with zero norm; their raw score was replaced by the
    /// smallest finite score.
    pub degenerate_rows: Vec<usize>,
}

impl FusionWeights {
    pub fn uniform(k: usize) -> Self {
        Self {
            raw_scores: vec![0.0; k],
            normalized: vec![1.0 / k as f64; k],
            degenerate_rows: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.normalized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normalized.is_empty()
    }
}

/// Importance of each refined sub-description for region `region`:
/// `cos(region, t̃_k) − cos(global, t̃_k)`, softmaxed.
pub fn contrastive_weights(
    region: &[f64],
    global: &[f64],
    refined: &Matrix,
) -> Result<FusionWeights> {
    let dim = refined.cols();
    if region.len() != dim || global.len() != dim {
        return Err(Error::validation(format!(
            "contrastive weights: region dim {}, global dim {}, sub-description dim {dim}",
            region.len(),
            global.len()
        )));
    }
    if refined.rows() == 0 {
        return Err(Error::validation(
            "contrastive weights need at least one sub-description",
        ));
    }
    if !(norm(region) > NORM_EPS) || !(norm(global) > NORM_EPS) {
        return Err(Error::degenerate(
            "region or global embedding has zero norm",
        ));
    }

    let mut raw = Vec::with_capacity(refined.rows());
    let mut degenerate_rows = Vec::new();
    for (k, t) in refined.row_iter().enumerate() {
        if norm(t) > NORM_EPS {
            raw.push(Some(cosine(region, t)? - cosine(global, t)?));
        } else {
            degenerate_rows.push(k);
            raw.push(None);
        }
    }
    let floor = raw.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let floor = if floor.is_finite() { floor } else { 0.0 };
    let raw_scores: Vec<f64> = raw.into_iter().map(|s| s.unwrap_or(floor)).collect();
    let normalized = softmax(&raw_scores)?;
    Ok(FusionWeights {
        raw_scores,
        normalized,
        degenerate_rows,
    })
}

/// A fused class vector. Near-zero results are flagged rather than rescaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedClassEmbedding {
    pub class_id: u32,
    pub vector: Vec<f64>,
    pub degenerate: bool,
}

impl FusedClassEmbedding {
    pub fn new(class_id: u32, vector: Vec<f64>) -> Self {
        let degenerate = !(norm(&vector) >= NORM_EPS);
        Self {
            class_id,
            vector,
            degenerate,
        }
    }
}

/// `Σ_k β_k t̃_k`
pub fn fuse_contrastive(
    weights: &FusionWeights,
    refined: &RefinedSubDescriptions,
) -> Result<FusedClassEmbedding> {
    let m = &refined.embeddings;
    if weights.len() != m.rows() {
        return Err(Error::validation(format!(
            "{} fusion weights for {} sub-descriptions",
            weights.len(),
            m.rows()
        )));
    }
    Ok(FusedClassEmbedding::new(
        refined.class_id,
        m.matvec_t(&weights.normalized),
    ))
}

/// Modified Gram–Schmidt over the rows in order. Returns the orthonormal rows
/// and the source index of each.
pub fn gram_schmidt(rows: &Matrix) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    for (k, r) in rows.row_iter().enumerate() {
        let mut v = r.to_vec();
        for b in &basis {
            let c = dot(&v, b);
            axpy(-c, b, &mut v);
        }
        let n = norm(&v);
        if n >= GS_DROP_TOL {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
            kept.push(k);
        }
    }
    (basis, kept)
}

/// Orthonormalizes the refined rows and sums them, uniformly or with the
/// given weights restricted to the surviving rows (renormalized to sum 1).
pub fn fuse_orthogonal(
    refined: &RefinedSubDescriptions,
    weights: Option<&FusionWeights>,
) -> Result<FusedClassEmbedding> {
    let m = &refined.embeddings;
    if m.rows() == 0 {
        return Err(Error::validation(
            "orthogonal fusion needs at least one sub-description",
        ));
    }
    if let Some(w) = weights {
        if w.len() != m.rows() {
            return Err(Error::validation(format!(
                "{} fusion weights for {} sub-descriptions",
                w.len(),
                m.rows()
            )));
        }
    }
    let (basis, kept) = gram_schmidt(m);
    if basis.is_empty() {
        return Err(Error::degenerate(format!(
            "class {}: every sub-description is degenerate under Gram–Schmidt",
            refined.class_id
        )));
    }
    let coeffs: Vec<f64> = match weights {
        None => vec![1.0 / basis.len() as f64; basis.len()],
        Some(w) => {
            let sel: Vec<f64> = kept.iter().map(|&k| w.normalized[k]).collect();
            let total: f64 = sel.iter().sum();
            sel.into_iter().map(|b| b / total).collect()
        }
    };
    let mut out = vec![0.0; m.cols()];
    for (b, c) in basis.iter().zip(&coeffs) {
        axpy(*c, b, &mut out);
    }
    Ok(FusedClassEmbedding::new(refined.class_id, out))
}

/// `Σ t_k / ‖Σ t_k‖` over the raw sub-descriptions.
pub fn fuse_sum_normalize(set: &SubDescriptionSet) -> Result<FusedClassEmbedding> {
    let sum = set.embeddings().matvec_t(&vec![1.0; set.len()]);
    let n = norm(&sum);
    if !(n >= NORM_EPS) {
        return Err(Error::degenerate(format!(
            "class {}: sub-descriptions cancel to a zero sum",
            set.class_id
        )));
    }
    Ok(FusedClassEmbedding::new(
        set.class_id,
        sum.into_iter().map(|x| x / n).collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    SumNormalize,
    Contrastive,
    Orthogonal,
    OrthogonalContrastive,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 4] = [
        FusionVariant::SumNormalize,
        FusionVariant::Contrastive,
        FusionVariant::Orthogonal,
        FusionVariant::OrthogonalContrastive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionVariant::SumNormalize => "sum_normalize",
            FusionVariant::Contrastive => "contrastive",
            FusionVariant::Orthogonal => "orthogonal",
            FusionVariant::OrthogonalContrastive => "orthogonal_contrastive",
        }
    }

    /// True when the fused vector depends on the region it is computed for.
    pub fn is_region_dependent(self) -> bool {
        matches!(
            self,
            FusionVariant::Contrastive | FusionVariant::OrthogonalContrastive
        )
    }
}

impl std::str::FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown fusion variant `{s}`")))
    }
}

impl std::fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Fuses one class for one region. `region`/`global` are only consulted by
/// the contrastive variants. Returns the fused vector and, for weighted
/// variants, the weights used.
pub fn fuse(
    variant: FusionVariant,
    set: &SubDescriptionSet,
    refined: &RefinedSubDescriptions,
    region: &[f64],
    global: &[f64],
) -> Result<(FusedClassEmbedding, Option<FusionWeights>)> {
    match variant {
        FusionVariant::SumNormalize => Ok((fuse_sum_normalize(set)?, None)),
        FusionVariant::Orthogonal => Ok((fuse_orthogonal(refined, None)?, None)),
        FusionVariant::Contrastive => {
            let w = contrastive_weights(region, global, &refined.embeddings)?;
            Ok((fuse_contrastive(&w, refined)?, Some(w)))
        }
        FusionVariant::OrthogonalContrastive => {
            let w = contrastive_weights(region, global, &refined.embeddings)?;
            Ok((fuse_orthogonal(refined, Some(&w))?, Some(w)))
        }
    }
}
