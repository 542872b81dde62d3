//! Spatially focused gating of visual feature maps.
//!
//! The gate for patch `j` is driven by `u_j = S_j / (r · d_j)`, the best
//! text–region similarity divided by the distance to the most text-similar
//! patch. A single 1×1 convolution lifts `u_j` to the feature channels and the
//! gain `1 + α·σ(·)` multiplies the features, so every patch keeps at least
//! its original response and none is amplified by more than `1 + α`.
//!
//! The target patch index is a constant for every gradient computed here.
//! GLU and SwiGLU layers are provided as ablation baselines.

use serde::{Deserialize, Serialize};

use crate::alignment::EmbeddingField;
use crate::error::{Error, Result};
use crate::numerics::{dot, sigmoid, Affine, Matrix};
use crate::textfusion::FusedClassEmbedding;

/// Gate logits are clamped to `±GATE_LOGIT_LIMIT` so the sigmoid stays
/// strictly inside `(0, 1)` in `f64`; beyond ~36 it rounds to exactly 1.
pub const GATE_LOGIT_LIMIT: f64 = 30.0;

/// Dense `H × W × C` activations, row-major by `(row, col, channel)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::validation(format!(
                "feature map dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::validation(format!(
                "feature map {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("feature map has non-finite entries"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// One row per patch, `C` values each.
    pub fn from_patches(height: usize, width: usize, patches: &Matrix) -> Result<Self> {
        if patches.rows() != height * width {
            return Err(Error::validation(format!(
                "{} patch rows for a {height}x{width} grid",
                patches.rows()
            )));
        }
        Self::new(height, width, patches.cols(), patches.as_slice().to_vec())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_patches(&self) -> usize {
        self.height * self.width
    }

    pub fn patch(&self, j: usize) -> &[f64] {
        &self.data[j * self.channels..(j + 1) * self.channels]
    }

    pub fn patch_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.channels..(j + 1) * self.channels]
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// Per-patch similarity scores `S_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityField(pub Vec<f64>);

impl SimilarityField {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Normalized cell-center coordinates of an `H × W` patch grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    coords: Vec<[f64; 2]>,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize) -> Self {
        let coords = (0..height)
            .flat_map(|row| {
                (0..width).map(move |col| {
                    [
                        (col as f64 + 0.5) / width as f64,
                        (row as f64 + 0.5) / height as f64,
                    ]
                })
            })
            .collect();
        Self {
            height,
            width,
            coords,
        }
    }

    pub fn coord(&self, j: usize) -> [f64; 2] {
        self.coords[j]
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// Temperature `r`.
    pub temperature: f64,
    /// Gain bound: gates lie in `(1, 1 + alpha)`.
    pub alpha: f64,
    /// Distance clamp.
    pub epsilon: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            alpha: 1.0,
            epsilon: 1e-8,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("temperature", self.temperature),
            ("alpha", self.alpha),
            ("epsilon", self.epsilon),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(format!(
                    "gate {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// 1×1 convolution from the scalar gate input to `C` channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateConvParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl GateConvParams {
    pub fn new(weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != bias.len() || weight.is_empty() {
            return Err(Error::validation(format!(
                "gate conv has {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn uniform(channels: usize, weight: f64, bias: f64) -> Self {
        Self {
            weight: vec![weight; channels],
            bias: vec![bias; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.len()
    }
}

/// `S_j = max_c σ(t_c · v_j)` for class-level fused embeddings.
pub fn region_scores(
    fused: &[FusedClassEmbedding],
    field: &EmbeddingField,
) -> Result<SimilarityField> {
    if fused.is_empty() {
        return Err(Error::validation("region scores need at least one class"));
    }
    for f in fused {
        if f.vector.len() != field.dim() {
            return Err(Error::validation(format!(
                "class {} embedding dim {} does not match region dim {}",
                f.class_id,
                f.vector.len(),
                field.dim()
            )));
        }
    }
    let scores = field
        .embeddings()
        .row_iter()
        .map(|v| {
            fused
                .iter()
                .map(|f| sigmoid(dot(&f.vector, v)))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Ok(SimilarityField(scores))
}

/// Like [`region_scores`] when the fused embedding differs per region:
/// `per_region[j][c]` is class `c`'s fused vector at region `j`.
pub fn region_scores_per_region(
    per_region: &[Vec<Vec<f64>>],
    field: &EmbeddingField,
) -> Result<SimilarityField> {
    if per_region.len() != field.len() {
        return Err(Error::validation(format!(
            "{} fused rows for {} regions",
            per_region.len(),
            field.len()
        )));
    }
    let scores = per_region
        .iter()
        .enumerate()
        .map(|(j, classes)| {
            if classes.is_empty() {
                return Err(Error::validation("region scores need at least one class"));
            }
            let v = field.region(j);
            let mut best = f64::NEG_INFINITY;
            for t in classes {
                if t.len() != v.len() {
                    return Err(Error::validation("fused embedding dim mismatch"));
                }
                best = best.max(sigmoid(dot(t, v)));
            }
            Ok(best)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimilarityField(scores))
}

/// `argmax_j S_j`, lowest index on ties.
pub fn target_patch(scores: &SimilarityField) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, &s) in scores.0.iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((j, s));
        }
    }
    best.map(|(j, _)| j)
        .ok_or_else(|| Error::validation("target patch of an empty similarity field"))
}

/// `max(‖p_j − p_target‖, eps)` for every patch.
pub fn spatial_distances(grid: &PatchGrid, target: usize, eps: f64) -> Result<Vec<f64>> {
    if target >= grid.len() {
        return Err(Error::validation(format!(
            "target patch {target} outside a grid of {} patches",
            grid.len()
        )));
    }
    let [tx, ty] = grid.coord(target);
    Ok((0..grid.len())
        .map(|j| {
            let [x, y] = grid.coord(j);
            ((x - tx).hypot(y - ty)).max(eps)
        })
        .collect())
}

fn check_gate_shapes(
    z: &FeatureMap,
    scores: &SimilarityField,
    dist: &[f64],
    conv: &GateConvParams,
) -> Result<()> {
    let n = z.num_patches();
    if scores.len() != n || dist.len() != n {
        return Err(Error::validation(format!(
            "gate inputs: {n} patches, {} scores, {} distances",
            scores.len(),
            dist.len()
        )));
    }
    if conv.channels() != z.channels() || conv.bias.len() != z.channels() {
        return Err(Error::validation(format!(
            "gate conv has {} channels, feature map has {}",
            conv.channels(),
            z.channels()
        )));
    }
    if dist.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(Error::validation("gate distances must be positive"));
    }
    if scores.0.iter().any(|s| !s.is_finite()) {
        return Err(Error::validation("gate similarity scores must be finite"));
    }
    Ok(())
}

#[inline]
fn clamped_logit(w: f64, u: f64, b: f64) -> (f64, bool) {
    let a = w * u + b;
    if a > GATE_LOGIT_LIMIT {
        (GATE_LOGIT_LIMIT, true)
    } else if a < -GATE_LOGIT_LIMIT {
        (-GATE_LOGIT_LIMIT, true)
    } else {
        (a, false)
    }
}

/// Gate values `1 + α·σ(w_c·u_j + b_c)`, laid out like the feature map.
pub fn sfglu_gate_values(
    z: &FeatureMap,
    scores: &SimilarityField,
    dist: &[f64],
    conv: &GateConvParams,
    cfg: &GateConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_gate_shapes(z, scores, dist, conv)?;
    let c = z.channels();
    let mut gates = Vec::with_capacity(z.as_slice().len());
    for (j, &d) in dist.iter().enumerate() {
        let u = scores.0[j] / (cfg.temperature * d);
        for ch in 0..c {
            let (a, _) = clamped_logit(conv.weight[ch], u, conv.bias[ch]);
            gates.push(1.0 + cfg.alpha * sigmoid(a));
        }
    }
    Ok(gates)
}

pub fn sfglu_gate(
    z: &FeatureMap,
    scores: &SimilarityField,
    dist: &[f64],
    conv: &GateConvParams,
    cfg: &GateConfig,
) -> Result<FeatureMap> {
    let gates = sfglu_gate_values(z, scores, dist, conv, cfg)?;
    let mut out = z.clone();
    out.data.iter_mut().zip(&gates).for_each(|(v, g)| *v *= g);
    Ok(out)
}

/// Finds the target patch, measures distances on the grid and gates `z`.
pub fn sfglu_apply(
    z: &FeatureMap,
    scores: &SimilarityField,
    conv: &GateConvParams,
    cfg: &GateConfig,
) -> Result<(FeatureMap, usize)> {
    let target = target_patch(scores)?;
    let grid = PatchGrid::new(z.height(), z.width());
    let dist = spatial_distances(&grid, target, cfg.epsilon)?;
    Ok((sfglu_gate(z, scores, &dist, conv, cfg)?, target))
}

#[derive(Debug, Clone)]
pub struct SfgluGrads {
    pub z: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub scores: Vec<f64>,
}

/// Backward pass of [`sfglu_gate`] with the target patch (hence `dist`) held
/// fixed.
pub fn sfglu_backward(
    z: &FeatureMap,
    scores: &SimilarityField,
    dist: &[f64],
    conv: &GateConvParams,
    cfg: &GateConfig,
    grad_out: &[f64],
) -> Result<SfgluGrads> {
    cfg.validate()?;
    check_gate_shapes(z, scores, dist, conv)?;
    if grad_out.len() != z.as_slice().len() {
        return Err(Error::validation(
            "gate output gradient has the wrong length",
        ));
    }
    let c = z.channels();
    let mut g = SfgluGrads {
        z: vec![0.0; grad_out.len()],
        weight: vec![0.0; c],
        bias: vec![0.0; c],
        scores: vec![0.0; z.num_patches()],
    };
    for (j, &d) in dist.iter().enumerate() {
        let scale = 1.0 / (cfg.temperature * d);
        let u = scores.0[j] * scale;
        for ch in 0..c {
            let idx = j * c + ch;
            let (a, clamped) = clamped_logit(conv.weight[ch], u, conv.bias[ch]);
            let s = sigmoid(a);
            g.z[idx] = grad_out[idx] * (1.0 + cfg.alpha * s);
            if clamped {
                continue;
            }
            let da = grad_out[idx] * z.data[idx] * cfg.alpha * s * (1.0 - s);
            g.weight[ch] += da * u;
            g.bias[ch] += da;
            g.scores[j] += da * conv.weight[ch] * scale;
        }
    }
    Ok(g)
}

/// Per-channel GLU: `z ⊙ σ(W z + b)` with a `C × C` 1×1 map.
pub fn glu_baseline(z: &FeatureMap, params: &Affine) -> Result<FeatureMap> {
    check_square(params, z.channels(), "glu")?;
    let mut out = z.clone();
    for j in 0..z.num_patches() {
        let a = params.forward(z.patch(j));
        out.patch_mut(j)
            .iter_mut()
            .zip(&a)
            .for_each(|(v, ai)| *v *= sigmoid(*ai));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineGrads {
    fn zeros(p: &Affine) -> Self {
        Self {
            weight: vec![0.0; p.weight.as_slice().len()],
            bias: vec![0.0; p.bias.len()],
        }
    }

    fn accumulate(&mut self, delta: &[f64], input: &[f64]) {
        let cols = input.len();
        for (r, &d) in delta.iter().enumerate() {
            for (c, &x) in input.iter().enumerate() {
                self.weight[r * cols + c] += d * x;
            }
            self.bias[r] += d;
        }
    }
}

pub fn glu_backward(
    z: &FeatureMap,
    params: &Affine,
    grad_out: &[f64],
) -> Result<(Vec<f64>, AffineGrads)> {
    check_square(params, z.channels(), "glu")?;
    let c = z.channels();
    let mut gz = vec![0.0; z.as_slice().len()];
    let mut gp = AffineGrads::zeros(params);
    for j in 0..z.num_patches() {
        let x = z.patch(j);
        let go = &grad_out[j * c..(j + 1) * c];
        let a = params.forward(x);
        let s: Vec<f64> = a.iter().map(|&v| sigmoid(v)).collect();
        let delta: Vec<f64> = (0..c).map(|i| go[i] * x[i] * s[i] * (1.0 - s[i])).collect();
        let back = params.weight.matvec_t(&delta);
        for i in 0..c {
            gz[j * c + i] = go[i] * s[i] + back[i];
        }
        gp.accumulate(&delta, x);
    }
    Ok((gz, gp))
}

/// Value and gate projections of a SwiGLU layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwiGluParams {
    pub value: Affine,
    pub gate: Affine,
}

#[inline]
fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `(W₁ z + b₁) ⊙ swish(W₂ z + b₂)` per patch.
pub fn swiglu_baseline(z: &FeatureMap, params: &SwiGluParams) -> Result<FeatureMap> {
    check_square(&params.value, z.channels(), "swiglu value")?;
    check_square(&params.gate, z.channels(), "swiglu gate")?;
    let mut out = z.clone();
    for j in 0..z.num_patches() {
        let v = params.value.forward(z.patch(j));
        let g = params.gate.forward(z.patch(j));
        out.patch_mut(j)
            .iter_mut()
            .enumerate()
            .for_each(|(i, o)| *o = v[i] * swish(g[i]));
    }
    Ok(out)
}

pub fn swiglu_backward(
    z: &FeatureMap,
    params: &SwiGluParams,
    grad_out: &[f64],
) -> Result<(Vec<f64>, AffineGrads, AffineGrads)> {
    check_square(&params.value, z.channels(), "swiglu value")?;
    check_square(&params.gate, z.channels(), "swiglu gate")?;
    let c = z.channels();
    let mut gz = vec![0.0; z.as_slice().len()];
    let mut gv = AffineGrads::zeros(&params.value);
    let mut gg = AffineGrads::zeros(&params.gate);
    for j in 0..z.num_patches() {
        let x = z.patch(j);
        let go = &grad_out[j * c..(j + 1) * c];
        let v = params.value.forward(x);
        let g = params.gate.forward(x);
        let dv: Vec<f64> = (0..c).map(|i| go[i] * swish(g[i])).collect();
        let dg: Vec<f64> = (0..c).map(|i| go[i] * v[i] * swish_grad(g[i])).collect();
        let bv = params.value.weight.matvec_t(&dv);
        let bg = params.gate.weight.matvec_t(&dg);
        for i in 0..c {
            gz[j * c + i] = bv[i] + bg[i];
        }
        gv.accumulate(&dv, x);
        gg.accumulate(&dg, x);
    }
    Ok((gz, gv, gg))
}

fn check_square(p: &Affine, c: usize, what: &str) -> Result<()> {
    if p.in_dim() != c || p.out_dim() != c || p.bias.len() != c {
        return Err(Error::validation(format!(
            "{what} map is {}→{} but the feature map has {c} channels",
            p.in_dim(),
            p.out_dim()
        )));
    }
    Ok(())
}

/// Which feature-modulation layer sits between region scoring and readout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateVariant {
    None,
    Glu,
    Swiglu,
    Sfglu,
}

impl GateVariant {
    pub const ALL: [GateVariant; 4] = [
        GateVariant::None,
        GateVariant::Glu,
        GateVariant::Swiglu,
        GateVariant::Sfglu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GateVariant::None => "none",
            GateVariant::Glu => "glu",
            GateVariant::Swiglu => "swiglu",
            GateVariant::Sfglu => "sfglu",
        }
    }
}

impl std::str::FromStr for GateVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GateVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown gate variant `{s}`")))
    }
}

impl std::fmt::Display for GateVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
