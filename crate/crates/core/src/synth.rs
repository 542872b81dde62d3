//! Synthetic camouflage benchmark.
//!
//! A scene is a `H × W` grid of patch embeddings. Background patches sit
//! near a unit direction `b`; object patches of class `c` sit near
//! `normalize(κ·b + (1−κ)·q_c)`, so a high camouflage coefficient `κ` makes
//! objects look like their surroundings. Each class carries `K`
//! sub-descriptions: informative ones near `q_c` and decoys near `b`.
//!
//! The pipeline fuses sub-descriptions, scores regions, optionally gates the
//! mean-removed patch features, reads out per-class patch scores with a fixed
//! linear map and turns thresholded 4-connected patch blocks into boxes.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::alignment::{
    alignment_decisions, batch_coverage_term, coverage_loss, coverage_loss_grad, iou,
    AlignmentConfig, BBox, CoveragePair, EmbeddingField,
};
use crate::dataset::{difficulty_score, split_by_terciles, DifficultyLevel};
use crate::error::{Error, Result};
use crate::eval::{evaluate, DetectionRecord, EvalConfig, GroundTruthRecord};
use crate::numerics::{axpy, cosine, dot, norm, normalized, sigmoid, Affine, Matrix};
use crate::sfglu::{
    glu_baseline, region_scores_per_region, sfglu_apply, sfglu_gate_values, spatial_distances,
    swiglu_baseline, FeatureMap, GateConfig, GateConvParams, GateVariant, PatchGrid,
    SimilarityField, SwiGluParams,
};
use crate::textfusion::{
    fuse, refine, AdapterParams, FusionVariant, RefinedSubDescriptions, SubDescriptionSet, SvdRank,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub embedding_dim: usize,
    pub height: usize,
    pub width: usize,
    /// Feature channels. The features are mean-removed patch embeddings, so
    /// this must equal `embedding_dim`.
    pub channels: usize,
    pub num_classes: usize,
    pub sub_descriptions_per_class: usize,
    pub camouflage: f64,
    /// Per-scene uniform jitter added to `camouflage`, clamped to `[0, 1]`.
    pub camouflage_jitter: f64,
    pub decoy_fraction: f64,
    pub scenes: usize,
    pub objects_per_scene: usize,
    /// Object side lengths in patches, inclusive.
    pub object_size_min: usize,
    pub object_size_max: usize,
    /// Norm scale of the isotropic noise added to patch embeddings.
    pub patch_noise: f64,
    /// Norm scale of the noise added to sub-description directions.
    pub text_noise: f64,
    /// Side of one patch in pixels; sets GT pixel areas.
    pub patch_pixels: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            embedding_dim: 32,
            height: 16,
            width: 16,
            channels: 32,
            num_classes: 4,
            sub_descriptions_per_class: 8,
            camouflage: 0.8,
            camouflage_jitter: 0.1,
            decoy_fraction: 0.3,
            scenes: 24,
            objects_per_scene: 2,
            object_size_min: 2,
            object_size_max: 6,
            patch_noise: 0.2,
            text_noise: 0.3,
            patch_pixels: 16,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embedding_dim", self.embedding_dim),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            (
                "sub_descriptions_per_class",
                self.sub_descriptions_per_class,
            ),
            ("scenes", self.scenes),
            ("object_size_min", self.object_size_min),
            ("patch_pixels", self.patch_pixels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be positive")));
            }
        }
        if self.channels != self.embedding_dim {
            return Err(Error::validation(format!(
                "channels ({}) must equal embedding_dim ({})",
                self.channels, self.embedding_dim
            )));
        }
        if self.embedding_dim < self.num_classes + 1 {
            return Err(Error::validation("embedding_dim must exceed num_classes"));
        }
        if self.object_size_min > self.object_size_max {
            return Err(Error::validation("object_size_min exceeds object_size_max"));
        }
        if self.objects_per_scene > 0 && self.num_classes == 0 {
            return Err(Error::validation("objects need at least one class"));
        }
        for (name, v) in [
            ("camouflage", self.camouflage),
            ("decoy_fraction", self.decoy_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        for (name, v) in [
            ("camouflage_jitter", self.camouflage_jitter),
            ("patch_noise", self.patch_noise),
            ("text_noise", self.text_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(format!(
                    "{name} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }

    pub fn num_decoys(&self) -> usize {
        (self.decoy_fraction * self.sub_descriptions_per_class as f64).round() as usize
    }

    pub fn image_pixels(&self) -> f64 {
        (self.height * self.width * self.patch_pixels * self.patch_pixels) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthObject {
    pub class_index: u32,
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
    pub camouflage: f64,
    /// Mean cosine between the object patches and the image mean.
    pub similarity: f64,
}

impl SynthObject {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row0 + self.rows).contains(&row)
            && (self.col0..self.col0 + self.cols).contains(&col)
    }

    pub fn patches(&self, width: usize) -> impl Iterator<Item = usize> + '_ {
        (self.row0..self.row0 + self.rows)
            .flat_map(move |r| (self.col0..self.col0 + self.cols).map(move |c| r * width + c))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthScene {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub field: EmbeddingField,
    /// Mean-removed patch embeddings.
    pub features: FeatureMap,
    pub objects: Vec<SynthObject>,
    pub ground_truth: Vec<GroundTruthRecord>,
    /// Positive region assigned to each ground-truth object.
    pub positive_indices: Vec<usize>,
    pub sub_descriptions: Vec<SubDescriptionSet>,
    /// `decoys[c][k]` marks sub-description `k` of class `c` as a decoy.
    pub decoys: Vec<Vec<bool>>,
    pub background: Vec<f64>,
    pub prototypes: Vec<Vec<f64>>,
    pub difficulty: f64,
}

/// RNG for scene `index` of `seed`: one ChaCha stream per scene.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    let s = scale / (dim as f64).sqrt();
    (0..dim)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            s * x
        })
        .collect()
}

fn unit<R: Rng + ?Sized>(rng: &mut R, dim: usize, against: &[Vec<f64>]) -> Vec<f64> {
    loop {
        let mut v = gaussian(rng, dim, 1.0);
        for a in against {
            let p = dot(&v, a);
            axpy(-p, a, &mut v);
        }
        if let Ok(u) = normalized(&v) {
            return u;
        }
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn place_objects<R: Rng + ?Sized>(
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<Vec<(usize, usize, usize, usize)>> {
    const ATTEMPTS: usize = 200;
    let max_side = cfg.object_size_max.min(cfg.height).min(cfg.width);
    if cfg.objects_per_scene > 0 && cfg.object_size_min > max_side {
        return Err(Error::validation(format!(
            "a {}x{} grid cannot hold objects of side {}",
            cfg.height, cfg.width, cfg.object_size_min
        )));
    }
    let mut placed: Vec<(usize, usize, usize, usize)> = Vec::new();
    for _ in 0..cfg.objects_per_scene {
        let mut ok = false;
        for _ in 0..ATTEMPTS {
            let h = rng.random_range(cfg.object_size_min..=max_side);
            let w = rng.random_range(cfg.object_size_min..=max_side);
            let r0 = rng.random_range(0..=cfg.height - h);
            let c0 = rng.random_range(0..=cfg.width - w);
            // one free patch between objects keeps their components apart
            let clear = placed.iter().all(|&(pr, pc, ph, pw)| {
                r0 > pr + ph || pr > r0 + h || c0 > pc + pw || pc > c0 + w
            });
            if clear {
                placed.push((r0, c0, h, w));
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::validation(format!(
                "could not place {} objects on a {}x{} grid",
                cfg.objects_per_scene, cfg.height, cfg.width
            )));
        }
    }
    Ok(placed)
}

/// Draws one scene. Deterministic in the state of `rng`.
pub fn generate_scene<R: Rng + ?Sized>(
    cfg: &SynthConfig,
    image_id: &str,
    rng: &mut R,
) -> Result<SynthScene> {
    cfg.validate()?;
    let d = cfg.embedding_dim;
    let (h, w) = (cfg.height, cfg.width);
    let background = unit(rng, d, &[]);
    let mut basis = vec![background.clone()];
    let mut prototypes = Vec::with_capacity(cfg.num_classes);
    for _ in 0..cfg.num_classes {
        let q = unit(rng, d, &basis);
        basis.push(q.clone());
        prototypes.push(q);
    }

    let mut sub_descriptions = Vec::with_capacity(cfg.num_classes);
    let mut decoys = Vec::with_capacity(cfg.num_classes);
    let k = cfg.sub_descriptions_per_class;
    let n_decoy = cfg.num_decoys();
    for (c, q) in prototypes.iter().enumerate() {
        let flags: Vec<bool> = (0..k).map(|i| i >= k - n_decoy).collect();
        let rows: Vec<Vec<f64>> = flags
            .iter()
            .map(|&decoy| {
                let dir = if decoy { &background } else { q };
                add(dir, &gaussian(rng, d, cfg.text_noise))
            })
            .collect();
        let labels = flags
            .iter()
            .enumerate()
            .map(|(i, &dec)| format!("{} {i}", if dec { "decoy" } else { "informative" }))
            .collect();
        sub_descriptions.push(SubDescriptionSet::new(
            c as u32,
            labels,
            Matrix::from_rows(&rows)?,
        )?);
        decoys.push(flags);
    }

    let boxes = place_objects(cfg, rng)?;
    let mut objects = Vec::with_capacity(boxes.len());
    for &(row0, col0, rows, cols) in &boxes {
        let class_index = rng.random_range(0..cfg.num_classes) as u32;
        let jitter = if cfg.camouflage_jitter > 0.0 {
            rng.random_range(-cfg.camouflage_jitter..=cfg.camouflage_jitter)
        } else {
            0.0
        };
        objects.push(SynthObject {
            class_index,
            row0,
            col0,
            rows,
            cols,
            camouflage: (cfg.camouflage + jitter).clamp(0.0, 1.0),
            similarity: 0.0,
        });
    }

    let mut data = Vec::with_capacity(h * w * d);
    for r in 0..h {
        for c in 0..w {
            let base = match objects.iter().find(|o| o.contains(r, c)) {
                Some(o) => {
                    let q = &prototypes[o.class_index as usize];
                    let mix: Vec<f64> = background
                        .iter()
                        .zip(q)
                        .map(|(bi, qi)| o.camouflage * bi + (1.0 - o.camouflage) * qi)
                        .collect();
                    normalized(&mix).unwrap_or_else(|_| background.clone())
                }
                None => background.clone(),
            };
            data.extend(add(&base, &gaussian(rng, d, cfg.patch_noise)));
        }
    }
    let field = EmbeddingField::new(Matrix::new(h * w, d, data)?)?;
    let mean = field.mean().to_vec();
    let mut centered = field.embeddings().clone();
    for r in 0..centered.rows() {
        axpy(-1.0, &mean, centered.row_mut(r));
    }
    let features = FeatureMap::from_patches(h, w, &centered)?;

    let pp = cfg.patch_pixels as f64;
    let mut ground_truth = Vec::with_capacity(objects.len());
    let mut positive_indices = Vec::with_capacity(objects.len());
    let mut scores = Vec::with_capacity(objects.len());
    for o in &mut objects {
        let patches: Vec<usize> = o.patches(w).collect();
        let sims: Vec<f64> = patches
            .iter()
            .map(|&j| cosine(field.region(j), &mean).unwrap_or(0.0))
            .collect();
        o.similarity = sims.iter().sum::<f64>() / sims.len() as f64;
        let bbox = BBox::new(
            o.col0 as f64 / w as f64,
            o.row0 as f64 / h as f64,
            (o.col0 + o.cols) as f64 / w as f64,
            (o.row0 + o.rows) as f64 / h as f64,
        )?;
        let area = (o.rows * o.cols) as f64 * pp * pp;
        ground_truth.push(GroundTruthRecord::new(
            image_id,
            o.class_index,
            bbox,
            Some(area),
        )?);
        // the assigner's positive: the object patch closest to the class prototype
        let q = &prototypes[o.class_index as usize];
        let best = patches
            .iter()
            .copied()
            .max_by(|&a, &b| {
                let sa = cosine(field.region(a), q).unwrap_or(f64::NEG_INFINITY);
                let sb = cosine(field.region(b), q).unwrap_or(f64::NEG_INFINITY);
                sa.total_cmp(&sb).then(b.cmp(&a))
            })
            .expect("objects cover at least one patch");
        positive_indices.push(best);
        scores.push(difficulty_score(o.similarity, area, cfg.image_pixels())?);
    }
    let difficulty = if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    };

    Ok(SynthScene {
        image_id: image_id.to_owned(),
        height: h,
        width: w,
        field,
        features,
        objects,
        ground_truth,
        positive_indices,
        sub_descriptions,
        decoys,
        background,
        prototypes,
        difficulty,
    })
}

pub fn image_id(seed: u64, index: usize) -> String {
    format!("s{seed}_{index:04}")
}

/// All scenes of `cfg.seed`, each from its own stream.
pub fn generate_scenes(cfg: &SynthConfig) -> Result<Vec<SynthScene>> {
    (0..cfg.scenes)
        .map(|i| {
            generate_scene(
                cfg,
                &image_id(cfg.seed, i),
                &mut scene_rng(cfg.seed, i as u64),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub fusion: FusionVariant,
    pub gate: GateVariant,
    pub svd_rank: SvdRank,
    pub lambda: f64,
    pub gate_config: GateConfig,
    /// Uniform 1×1 conv of the SF-GLU gate.
    pub gate_weight: f64,
    pub gate_bias: f64,
    /// Readout logit `gain · (t̂ · z) + offset`.
    pub readout_gain: f64,
    pub readout_offset: f64,
    pub score_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            fusion: FusionVariant::Contrastive,
            gate: GateVariant::Sfglu,
            svd_rank: SvdRank::default(),
            lambda: 5.0,
            gate_config: GateConfig::default(),
            gate_weight: 1.0,
            gate_bias: -6.0,
            readout_gain: 20.0,
            readout_offset: -3.0,
            score_threshold: 0.6,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.svd_rank.validate()?;
        self.gate_config.validate()?;
        AlignmentConfig {
            lambda: self.lambda,
            ..AlignmentConfig::default()
        }
        .validate()?;
        for (name, v) in [
            ("gate_weight", self.gate_weight),
            ("gate_bias", self.gate_bias),
            ("readout_gain", self.readout_gain),
            ("readout_offset", self.readout_offset),
        ] {
            if !v.is_finite() {
                return Err(Error::validation(format!("{name} must be finite")));
            }
        }
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return Err(Error::validation("score_threshold must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("{}+{} λ={}", self.fusion, self.gate, self.lambda)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFusionDiag {
    pub class_index: u32,
    /// Fusion weights at the class's positive regions, averaged; uniform for
    /// region-independent variants.
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub fusion: Vec<ClassFusionDiag>,
    pub mean_beta_decoy: Option<f64>,
    pub mean_beta_informative: Option<f64>,
    pub target_patch: Option<usize>,
    pub gate_mean: Option<f64>,
    pub gate_max: Option<f64>,
    /// `(‖z'‖ in / ‖z'‖ out) / (‖z‖ in / ‖z‖ out)` over GT patches.
    pub focus_ratio: Option<f64>,
    pub gated_pairs: usize,
    pub coverage_losses: Vec<f64>,
    pub coverage_term: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub detections: Vec<DetectionRecord>,
    pub diagnostics: Diagnostics,
}

fn mean_of(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// 4-connected components of `mask` on an `h × w` grid, in scan order.
pub fn connected_components(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = Vec::new();
        let mut stack = vec![start];
        while let Some(j) = stack.pop() {
            comp.push(j);
            let (r, c) = (j / w, j % w);
            let mut visit = |n: usize| {
                if mask[n] && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            };
            if r > 0 {
                visit(j - w);
            }
            if r + 1 < h {
                visit(j + w);
            }
            if c > 0 {
                visit(j - 1);
            }
            if c + 1 < w {
                visit(j + 1);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

fn component_box(comp: &[usize], h: usize, w: usize) -> Result<BBox> {
    let rows = comp.iter().map(|&j| j / w);
    let cols = comp.iter().map(|&j| j % w);
    let (r0, r1) = (rows.clone().min().unwrap(), rows.max().unwrap());
    let (c0, c1) = (cols.clone().min().unwrap(), cols.max().unwrap());
    BBox::new(
        c0 as f64 / w as f64,
        r0 as f64 / h as f64,
        (c1 + 1) as f64 / w as f64,
        (r1 + 1) as f64 / h as f64,
    )
}

fn apply_gate(
    scene: &SynthScene,
    scores: &SimilarityField,
    run: &RunConfig,
) -> Result<(FeatureMap, Option<usize>, Option<Vec<f64>>)> {
    let z = &scene.features;
    let c = z.channels();
    match run.gate {
        GateVariant::None => Ok((z.clone(), None, None)),
        GateVariant::Glu => Ok((glu_baseline(z, &Affine::identity(c))?, None, None)),
        GateVariant::Swiglu => {
            let p = SwiGluParams {
                value: Affine::identity(c),
                gate: Affine::identity(c),
            };
            Ok((swiglu_baseline(z, &p)?, None, None))
        }
        GateVariant::Sfglu => {
            let conv = GateConvParams::uniform(c, run.gate_weight, run.gate_bias);
            let (out, target) = sfglu_apply(z, scores, &conv, &run.gate_config)?;
            let dist = spatial_distances(
                &PatchGrid::new(z.height(), z.width()),
                target,
                run.gate_config.epsilon,
            )?;
            let gates = sfglu_gate_values(z, scores, &dist, &conv, &run.gate_config)?;
            Ok((out, Some(target), Some(gates)))
        }
    }
}

fn focus_ratio(scene: &SynthScene, before: &FeatureMap, after: &FeatureMap) -> Option<f64> {
    let w = scene.width;
    let inside: Vec<bool> = (0..before.num_patches())
        .map(|j| scene.objects.iter().any(|o| o.contains(j / w, j % w)))
        .collect();
    let avg = |m: &FeatureMap, want: bool| {
        mean_of(
            &(0..m.num_patches())
                .filter(|&j| inside[j] == want)
                .map(|j| norm(m.patch(j)))
                .collect::<Vec<_>>(),
        )
    };
    let (bi, bo, ai, ao) = (
        avg(before, true)?,
        avg(before, false)?,
        avg(after, true)?,
        avg(after, false)?,
    );
    (bi > 0.0 && bo > 0.0 && ao > 0.0).then(|| (ai / ao) / (bi / bo))
}

/// Fusion → region scores → gate → readout → boxes, for one scene.
#[allow(clippy::needless_range_loop)] // per-class loops index several tables at once
pub fn run_pipeline(scene: &SynthScene, run: &RunConfig) -> Result<PipelineOutput> {
    run.validate()?;
    let n_classes = scene.sub_descriptions.len();
    let n = scene.field.len();
    let mut diagnostics = Diagnostics {
        fusion: Vec::new(),
        mean_beta_decoy: None,
        mean_beta_informative: None,
        target_patch: None,
        gate_mean: None,
        gate_max: None,
        focus_ratio: None,
        gated_pairs: 0,
        coverage_losses: Vec::new(),
        coverage_term: 0.0,
    };
    if n_classes == 0 {
        return Ok(PipelineOutput {
            detections: Vec::new(),
            diagnostics,
        });
    }

    let adapter = AdapterParams::identity(scene.field.dim());
    let refined: Vec<RefinedSubDescriptions> = scene
        .sub_descriptions
        .iter()
        .map(|s| refine(s, run.svd_rank, &adapter))
        .collect::<Result<_>>()?;

    // fused[j][c], plus the weights used at each region
    let global = scene.field.mean();
    let mut fused: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n);
    let mut weights: Vec<Vec<Option<Vec<f64>>>> = Vec::with_capacity(n);
    let shared: Option<Vec<Vec<f64>>> = if run.fusion.is_region_dependent() {
        None
    } else {
        Some(
            (0..n_classes)
                .map(|c| {
                    fuse(
                        run.fusion,
                        &scene.sub_descriptions[c],
                        &refined[c],
                        global,
                        global,
                    )
                    .map(|(f, _)| f.vector)
                })
                .collect::<Result<_>>()?,
        )
    };
    for j in 0..n {
        match &shared {
            Some(s) => {
                fused.push(s.clone());
                weights.push(vec![None; n_classes]);
            }
            None => {
                let mut fj = Vec::with_capacity(n_classes);
                let mut wj = Vec::with_capacity(n_classes);
                for (subs, r) in scene.sub_descriptions.iter().zip(&refined) {
                    let (f, wt) = fuse(run.fusion, subs, r, scene.field.region(j), global)?;
                    fj.push(f.vector);
                    wj.push(wt.map(|w| w.normalized));
                }
                fused.push(fj);
                weights.push(wj);
            }
        }
    }

    let (mut decoy_b, mut info_b) = (Vec::new(), Vec::new());
    for c in 0..n_classes {
        let k = scene.sub_descriptions[c].len();
        let positives: Vec<usize> = scene
            .objects
            .iter()
            .zip(&scene.positive_indices)
            .filter(|(o, _)| o.class_index as usize == c)
            .map(|(_, &p)| p)
            .collect();
        let mut beta = vec![0.0; k];
        let regions: Vec<usize> = if positives.is_empty() {
            Vec::new()
        } else {
            positives
        };
        let mut counted = 0usize;
        for &p in &regions {
            let b = weights[p][c]
                .clone()
                .unwrap_or_else(|| vec![1.0 / k as f64; k]);
            for (i, v) in b.iter().enumerate() {
                beta[i] += v;
                if scene.decoys[c][i] {
                    decoy_b.push(*v);
                } else {
                    info_b.push(*v);
                }
            }
            counted += 1;
        }
        if counted == 0 {
            beta = vec![1.0 / k as f64; k];
        } else {
            beta.iter_mut().for_each(|v| *v /= counted as f64);
        }
        diagnostics.fusion.push(ClassFusionDiag {
            class_index: c as u32,
            beta,
        });
    }
    diagnostics.mean_beta_decoy = mean_of(&decoy_b);
    diagnostics.mean_beta_informative = mean_of(&info_b);

    let scores = region_scores_per_region(&fused, &scene.field)?;
    let (gated, target, gates) = apply_gate(scene, &scores, run)?;
    diagnostics.target_patch = target;
    if let Some(g) = &gates {
        diagnostics.gate_mean = mean_of(g);
        diagnostics.gate_max = g.iter().copied().reduce(f64::max);
    }
    diagnostics.focus_ratio = focus_ratio(scene, &scene.features, &gated);

    let (h, w) = (scene.height, scene.width);
    let mut detections = Vec::new();
    for c in 0..n_classes {
        let probs: Vec<f64> = (0..n)
            .map(|j| {
                let t = &fused[j][c];
                let tn = norm(t);
                let proj = if tn > 0.0 {
                    dot(t, gated.patch(j)) / tn
                } else {
                    0.0
                };
                sigmoid(run.readout_gain * proj + run.readout_offset)
            })
            .collect();
        let mask: Vec<bool> = probs.iter().map(|&p| p > run.score_threshold).collect();
        for comp in connected_components(&mask, h, w) {
            let conf = comp.iter().map(|&j| probs[j]).sum::<f64>() / comp.len() as f64;
            detections.push(DetectionRecord::new(
                scene.image_id.clone(),
                c as u32,
                component_box(&comp, h, w)?,
                conf,
            )?);
        }
    }

    // alignment: positive region vs each sub-description's specific region
    let mut pairs = Vec::new();
    for ((o, gt), &pos) in scene
        .objects
        .iter()
        .zip(&scene.ground_truth)
        .zip(&scene.positive_indices)
    {
        let c = o.class_index as usize;
        let pred = detections
            .iter()
            .filter(|d| d.class_index == o.class_index)
            .max_by(|a, b| iou(&a.bbox, &gt.bbox).total_cmp(&iou(&b.bbox, &gt.bbox)))
            .map(|d| d.bbox);
        let Some(pred) = pred else { continue };
        for dec in alignment_decisions(&scene.field, &refined[c].embeddings, pos)? {
            pairs.push(CoveragePair {
                pred,
                gt: gt.bbox,
                gated: dec.gated,
            });
        }
    }
    diagnostics.gated_pairs = pairs.iter().filter(|p| p.gated).count();
    diagnostics.coverage_losses = pairs
        .iter()
        .filter(|p| p.gated)
        .map(|p| coverage_loss(&p.pred, &p.gt))
        .collect::<Result<_>>()?;
    diagnostics.coverage_term = batch_coverage_term(
        &pairs,
        &AlignmentConfig {
            lambda: run.lambda,
            ..AlignmentConfig::default()
        },
    )?;

    Ok(PipelineOutput {
        detections,
        diagnostics,
    })
}

/// Per-seed result of one run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub ap_mild: Option<f64>,
    pub ap_moderate: Option<f64>,
    pub ap_severe: Option<f64>,
    pub mean_beta_decoy: Option<f64>,
    pub mean_beta_informative: Option<f64>,
    pub focus_ratio: Option<f64>,
    pub coverage_term: f64,
}

/// Runs one configuration over a seed's scenes and evaluates them together,
/// with scene difficulty split into terciles.
pub fn evaluate_seed(seed: u64, scenes: &[SynthScene], run: &RunConfig) -> Result<SeedResult> {
    let levels = split_by_terciles(&scenes.iter().map(|s| s.difficulty).collect::<Vec<_>>());
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let (mut bd, mut bi, mut fr, mut cov) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut difficulty = BTreeMap::new();
    for (scene, level) in scenes.iter().zip(levels) {
        let out = run_pipeline(scene, run)?;
        dets.extend(out.detections);
        gts.extend(scene.ground_truth.iter().cloned());
        difficulty.insert(scene.image_id.clone(), level);
        let d = out.diagnostics;
        bd.extend(d.mean_beta_decoy);
        bi.extend(d.mean_beta_informative);
        fr.extend(d.focus_ratio);
        cov.push(d.coverage_term);
    }
    let report = evaluate(&dets, &gts, &EvalConfig { difficulty });
    let level_ap = |l: DifficultyLevel| {
        report
            .per_difficulty
            .iter()
            .find(|r| r.level == l)
            .and_then(|r| r.ap)
    };
    Ok(SeedResult {
        seed,
        ap: report.ap,
        ap50: report.ap50,
        ap75: report.ap75,
        ap_medium: report.ap_medium,
        ap_large: report.ap_large,
        ap_mild: level_ap(DifficultyLevel::Mild),
        ap_moderate: level_ap(DifficultyLevel::Moderate),
        ap_severe: level_ap(DifficultyLevel::Severe),
        mean_beta_decoy: mean_of(&bd),
        mean_beta_informative: mean_of(&bi),
        focus_ratio: mean_of(&fr),
        coverage_term: mean_of(&cov).unwrap_or(0.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub synth: SynthConfig,
    pub seeds: Vec<u64>,
    pub fusions: Vec<FusionVariant>,
    pub gates: Vec<GateVariant>,
    pub lambdas: Vec<f64>,
    /// Everything except fusion, gate and λ.
    pub base: RunConfig,
    /// Fraction of seeds a directional comparison must win.
    pub win_fraction: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            seeds: (0..20).collect(),
            fusions: FusionVariant::ALL.to_vec(),
            gates: GateVariant::ALL.to_vec(),
            lambdas: vec![0.0, 2.0, 5.0, 7.0, 10.0],
            base: RunConfig::default(),
            win_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub fusion: FusionVariant,
    pub gate: GateVariant,
    pub lambda: f64,
    pub mean_ap: Option<f64>,
    pub mean_ap50: Option<f64>,
    pub mean_ap75: Option<f64>,
    pub mean_ap_mild: Option<f64>,
    pub mean_ap_moderate: Option<f64>,
    pub mean_ap_severe: Option<f64>,
    pub mean_coverage_term: f64,
    pub seeds: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub name: String,
    pub better: String,
    pub worse: String,
    /// Per-seed wins use `>` when strict, `>=` otherwise.
    pub strict: bool,
    pub wins: usize,
    pub seeds: usize,
    pub required_wins: usize,
    pub mean_better: Option<f64>,
    pub mean_worse: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub runs: Vec<RunSummary>,
    pub comparisons: Vec<Comparison>,
}

impl BenchReport {
    pub fn passed(&self) -> bool {
        self.comparisons.iter().all(|c| c.passed)
    }

    pub fn find(
        &self,
        fusion: FusionVariant,
        gate: GateVariant,
        lambda: f64,
    ) -> Option<&RunSummary> {
        self.runs
            .iter()
            .find(|r| r.fusion == fusion && r.gate == gate && r.lambda == lambda)
    }

    /// Fixed-width comparison table.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "   -  ".to_owned(), |x| format!("{x:.4}"));
        let mut out = format!(
            "{:<24} {:<7} {:>5}  {:>6} {:>6} {:>6}  {:>6} {:>6} {:>6}  {:>8}\n",
            "fusion", "gate", "λ", "AP", "AP50", "AP75", "mild", "moder", "severe", "coverage"
        );
        for r in &self.runs {
            out.push_str(&format!(
                "{:<24} {:<7} {:>5}  {:>6} {:>6} {:>6}  {:>6} {:>6} {:>6}  {:>8.4}\n",
                r.fusion.name(),
                r.gate.name(),
                r.lambda,
                fmt(r.mean_ap),
                fmt(r.mean_ap50),
                fmt(r.mean_ap75),
                fmt(r.mean_ap_mild),
                fmt(r.mean_ap_moderate),
                fmt(r.mean_ap_severe),
                r.mean_coverage_term
            ));
        }
        for c in &self.comparisons {
            out.push_str(&format!(
                "{} {}: {} {} {} in {}/{} seeds (need {}), means {} vs {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.better,
                if c.strict { ">" } else { ">=" },
                c.worse,
                c.wins,
                c.seeds,
                c.required_wins,
                fmt(c.mean_better),
                fmt(c.mean_worse)
            ));
        }
        out
    }
}

fn mean_opt<'a>(xs: impl Iterator<Item = &'a Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.copied().collect::<Option<Vec<_>>>()?;
    mean_of(&v)
}

fn summarize(
    fusion: FusionVariant,
    gate: GateVariant,
    lambda: f64,
    seeds: Vec<SeedResult>,
) -> RunSummary {
    RunSummary {
        fusion,
        gate,
        lambda,
        mean_ap: mean_opt(seeds.iter().map(|s| &s.ap)),
        mean_ap50: mean_opt(seeds.iter().map(|s| &s.ap50)),
        mean_ap75: mean_opt(seeds.iter().map(|s| &s.ap75)),
        mean_ap_mild: mean_opt(seeds.iter().map(|s| &s.ap_mild)),
        mean_ap_moderate: mean_opt(seeds.iter().map(|s| &s.ap_moderate)),
        mean_ap_severe: mean_opt(seeds.iter().map(|s| &s.ap_severe)),
        mean_coverage_term: seeds.iter().map(|s| s.coverage_term).sum::<f64>()
            / seeds.len().max(1) as f64,
        seeds,
    }
}

/// Compares per-seed AP of two runs. Absent values never win.
pub fn compare(
    name: &str,
    better: &RunSummary,
    worse: &RunSummary,
    strict: bool,
    win_fraction: f64,
) -> Comparison {
    let wins = better
        .seeds
        .iter()
        .zip(&worse.seeds)
        .filter(|(a, b)| match (a.ap, b.ap) {
            (Some(x), Some(y)) => {
                if strict {
                    x > y
                } else {
                    x >= y
                }
            }
            _ => false,
        })
        .count();
    let seeds = better.seeds.len();
    let required_wins = (win_fraction * seeds as f64).ceil() as usize;
    let means_ok = match (better.mean_ap, worse.mean_ap) {
        (Some(a), Some(b)) => {
            if strict {
                a > b
            } else {
                a >= b
            }
        }
        _ => false,
    };
    let label = |r: &RunSummary| format!("{}+{}", r.fusion, r.gate);
    Comparison {
        name: name.to_owned(),
        better: label(better),
        worse: label(worse),
        strict,
        wins,
        seeds,
        required_wins,
        mean_better: better.mean_ap,
        mean_worse: worse.mean_ap,
        passed: means_ok && wins >= required_wins,
    }
}

/// Mild > moderate > severe on seed-averaged AP.
pub fn difficulty_comparison(run: &RunSummary) -> Comparison {
    let ok = match (run.mean_ap_mild, run.mean_ap_moderate, run.mean_ap_severe) {
        (Some(a), Some(b), Some(c)) => a > b && b > c,
        _ => false,
    };
    Comparison {
        name: "difficulty ordering".to_owned(),
        better: format!("mild > moderate > severe on {}+{}", run.fusion, run.gate),
        worse: String::new(),
        strict: true,
        wins: usize::from(ok),
        seeds: run.seeds.len(),
        required_wins: 1,
        mean_better: run.mean_ap_mild,
        mean_worse: run.mean_ap_severe,
        passed: ok,
    }
}

/// Runs every `fusion × gate × λ` combination on every seed.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.synth.validate()?;
    if cfg.seeds.is_empty() {
        return Err(Error::validation("benchmark needs at least one seed"));
    }
    let combos: Vec<(FusionVariant, GateVariant, f64)> = cfg
        .fusions
        .iter()
        .flat_map(|&f| {
            cfg.gates
                .iter()
                .flat_map(move |&g| cfg.lambdas.iter().map(move |&l| (f, g, l)))
        })
        .collect();
    let mut per_combo: Vec<Vec<SeedResult>> =
        vec![Vec::with_capacity(cfg.seeds.len()); combos.len()];
    for &seed in &cfg.seeds {
        let scenes = generate_scenes(&SynthConfig {
            seed,
            ..cfg.synth.clone()
        })?;
        for (i, &(fusion, gate, lambda)) in combos.iter().enumerate() {
            let run = RunConfig {
                fusion,
                gate,
                lambda,
                ..cfg.base.clone()
            };
            per_combo[i].push(evaluate_seed(seed, &scenes, &run)?);
        }
    }
    let runs: Vec<RunSummary> = combos
        .iter()
        .zip(per_combo)
        .map(|(&(f, g, l), s)| summarize(f, g, l, s))
        .collect();

    let mut report = BenchReport {
        config: cfg.clone(),
        runs,
        comparisons: Vec::new(),
    };
    let lambda = if cfg.lambdas.contains(&cfg.base.lambda) {
        cfg.base.lambda
    } else {
        cfg.lambdas[0]
    };
    let pick = |f, g| report.find(f, g, lambda).cloned();
    let mut comparisons = Vec::new();
    if let (Some(c), Some(s)) = (
        pick(FusionVariant::Contrastive, GateVariant::None),
        pick(FusionVariant::SumNormalize, GateVariant::None),
    ) {
        comparisons.push(compare(
            "contrastive fusion",
            &c,
            &s,
            true,
            cfg.win_fraction,
        ));
    }
    if let (Some(g), Some(c)) = (
        pick(FusionVariant::Contrastive, GateVariant::Sfglu),
        pick(FusionVariant::Contrastive, GateVariant::None),
    ) {
        comparisons.push(compare("sf-glu gating", &g, &c, false, cfg.win_fraction));
        comparisons.push(difficulty_comparison(&g));
    }
    report.comparisons = comparisons;
    Ok(report)
}

/// Gradient-descent trace of the box-shrink toy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkTrace {
    pub lambda: f64,
    /// Mean coverage loss of the gated pairs after each step (index 0 is the
    /// start).
    pub mean_coverage: Vec<f64>,
    pub coverage_term: Vec<f64>,
}

/// One-dimensional box shrink: only the right edge `x2` of each predicted
/// box moves. The base objective pulls `x2` toward a target slightly past
/// the GT edge; gated pairs also carry `λ · coverage_loss`.
pub fn box_shrink_toy(
    lambda: f64,
    pairs: usize,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<ShrinkTrace> {
    let cfg = AlignmentConfig {
        lambda,
        ..AlignmentConfig::default()
    };
    cfg.validate()?;
    if pairs == 0 {
        return Err(Error::validation("box shrink needs at least one pair"));
    }
    let mut rng = scene_rng(seed, 0);
    let mut items: Vec<(CoveragePair, f64)> = (0..pairs)
        .map(|i| {
            let x1 = rng.random_range(0.05..0.3);
            let g2 = rng.random_range(0.5..0.7);
            let (y1, y2) = (0.2, 0.8);
            let gt = BBox::new(x1, y1, g2, y2).expect("ordered corners");
            let start = g2 + rng.random_range(0.1..0.2);
            let pred = BBox::new(x1, y1, start, y2).expect("ordered corners");
            let target = g2 + 0.05;
            (
                CoveragePair {
                    pred,
                    gt,
                    gated: i % 4 != 3,
                },
                target,
            )
        })
        .collect();
    let n = items.len() as f64;
    let n_gated = items.iter().filter(|(p, _)| p.gated).count().max(1) as f64;
    let snapshot = |items: &[(CoveragePair, f64)]| -> Result<(f64, f64)> {
        let pairs: Vec<CoveragePair> = items.iter().map(|(p, _)| *p).collect();
        let losses = pairs
            .iter()
            .filter(|p| p.gated)
            .map(|p| coverage_loss(&p.pred, &p.gt))
            .collect::<Result<Vec<_>>>()?;
        Ok((
            mean_of(&losses).unwrap_or(0.0),
            batch_coverage_term(&pairs, &cfg)?,
        ))
    };
    let (m, t) = snapshot(&items)?;
    let mut trace = ShrinkTrace {
        lambda,
        mean_coverage: vec![m],
        coverage_term: vec![t],
    };
    for _ in 0..steps {
        for (p, target) in items.iter_mut() {
            let mut g = 2.0 * (p.pred.x2 - *target) / n;
            if p.gated {
                g += lambda / n_gated * coverage_loss_grad(&p.pred, &p.gt)?[2];
            }
            let x2 = (p.pred.x2 - lr * g).clamp(p.pred.x1 + 1e-3, 1.0);
            p.pred = BBox::new(p.pred.x1, p.pred.y1, x2, p.pred.y2)?;
        }
        let (m, t) = snapshot(&items)?;
        trace.mean_coverage.push(m);
        trace.coverage_term.push(t);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            scenes: 4,
            height: 10,
            width: 10,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn scenes_are_deterministic() {
        let a = generate_scenes(&small()).unwrap();
        let b = generate_scenes(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_scenes(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a[0].field, c[0].field);
    }

    #[test]
    fn ground_truth_matches_objects() {
        for s in generate_scenes(&small()).unwrap() {
            assert_eq!(s.ground_truth.len(), s.objects.len());
            assert_eq!(s.positive_indices.len(), s.objects.len());
            for ((o, g), &p) in s
                .objects
                .iter()
                .zip(&s.ground_truth)
                .zip(&s.positive_indices)
            {
                g.bbox.validate().unwrap();
                assert!(o.contains(p / s.width, p % s.width));
            }
        }
    }

    #[test]
    fn too_small_grid_is_rejected() {
        let cfg = SynthConfig {
            height: 3,
            width: 3,
            object_size_min: 2,
            object_size_max: 2,
            objects_per_scene: 3,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_scenes(&cfg), Err(Error::Validation(_))));
        let cfg = SynthConfig {
            height: 3,
            width: 3,
            object_size_min: 4,
            object_size_max: 5,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_scenes(&cfg), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_classes_give_no_detections() {
        let cfg = SynthConfig {
            num_classes: 0,
            objects_per_scene: 0,
            ..small()
        };
        let scene = &generate_scenes(&cfg).unwrap()[0];
        let out = run_pipeline(scene, &RunConfig::default()).unwrap();
        assert!(out.detections.is_empty());
    }

    #[test]
    fn reported_betas_sum_to_one() {
        let scene = &generate_scenes(&small()).unwrap()[0];
        for fusion in FusionVariant::ALL {
            let out = run_pipeline(
                scene,
                &RunConfig {
                    fusion,
                    ..RunConfig::default()
                },
            )
            .unwrap();
            for c in &out.diagnostics.fusion {
                assert!((c.beta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn components_are_four_connected() {
        #[rustfmt::skip]
        let mask = [
            true,  true,  false,
            false, false, true,
            true,  false, true,
        ];
        assert_eq!(
            connected_components(&mask, 3, 3),
            vec![vec![0, 1], vec![5, 8], vec![6]]
        );
    }

    #[test]
    fn shrink_toy_with_zero_lambda_has_zero_term() {
        let t = box_shrink_toy(0.0, 8, 10, 0.5, 0).unwrap();
        assert!(t.coverage_term.iter().all(|&v| v == 0.0));
    }
}
