//! Finite-difference checks for every hand-written backward pass.
//!
//! Each instance draws random inputs, parameters and an upstream gradient
//! `g`, takes the scalar loss `L = Σ g ⊙ f(x)` and compares the analytic
//! gradients against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numerics::{dot, finite_diff_grad, max_relative_error, sigmoid, Affine};
use crate::sfglu::{
    glu_backward, glu_baseline, sfglu_backward, sfglu_gate, spatial_distances, swiglu_backward,
    swiglu_baseline, target_patch, FeatureMap, GateConfig, GateConvParams, PatchGrid,
    SimilarityField, SwiGluParams,
};
use crate::textfusion::{adapter_backward, adapter_forward, Activation, AdapterParams};
use crate::Result;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 50;
/// Central-difference step for the suites, near the cube root of machine
/// epsilon where truncation and round-off error balance.
pub const SUITE_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub instances: usize,
    pub tolerance: f64,
    pub step: f64,
    /// Text embedding width for the adapter.
    pub dim: usize,
    pub hidden: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: DEFAULT_INSTANCES,
            tolerance: DEFAULT_TOLERANCE,
            step: SUITE_STEP,
            dim: 8,
            hidden: 16,
            height: 4,
            width: 4,
            channels: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub worst_instance: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub suites: Vec<SuiteResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn random_map<R: Rng + ?Sized>(rng: &mut R, cfg: &GradcheckConfig) -> FeatureMap {
    let n = cfg.height * cfg.width * cfg.channels;
    FeatureMap::new(cfg.height, cfg.width, cfg.channels, normal_vec(rng, n))
        .expect("shape is consistent")
}

fn with_data(z: &FeatureMap, data: &[f64]) -> FeatureMap {
    FeatureMap::new(z.height(), z.width(), z.channels(), data.to_vec())
        .expect("shape is consistent")
}

/// Max relative error of one adapter instance over parameters and input.
pub fn adapter_instance<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &GradcheckConfig,
    activation: Activation,
) -> Result<f64> {
    let p = AdapterParams::random(cfg.dim, cfg.hidden, activation, rng);
    let t = normal_vec(rng, cfg.dim);
    let g = normal_vec(rng, cfg.dim);
    let loss =
        |p: &AdapterParams, t: &[f64]| dot(&g, &adapter_forward(p, t).expect("valid adapter"));
    let analytic = adapter_backward(&p, &t, &g)?;
    let fd_params = finite_diff_grad(|flat| loss(&p.with_flat(flat), &t), &p.to_flat(), cfg.step);
    let fd_input = finite_diff_grad(|x| loss(&p, x), &t, cfg.step);
    Ok(max_relative_error(&analytic.params, &fd_params)
        .max(max_relative_error(&analytic.input, &fd_input)))
}

/// SF-GLU with the target patch found once and then held fixed.
pub fn sfglu_instance<R: Rng + ?Sized>(rng: &mut R, cfg: &GradcheckConfig) -> Result<f64> {
    let z = random_map(rng, cfg);
    let scores = SimilarityField(
        normal_vec(rng, z.num_patches())
            .into_iter()
            .map(sigmoid)
            .collect(),
    );
    let conv = GateConvParams::new(normal_vec(rng, cfg.channels), normal_vec(rng, cfg.channels))?;
    let gate_cfg = GateConfig {
        temperature: rng.random_range(0.5..2.0),
        alpha: rng.random_range(0.5..1.5),
        ..GateConfig::default()
    };
    let target = target_patch(&scores)?;
    let dist = spatial_distances(
        &PatchGrid::new(cfg.height, cfg.width),
        target,
        gate_cfg.epsilon,
    )?;
    let g = normal_vec(rng, z.as_slice().len());
    let loss = |z: &FeatureMap, s: &SimilarityField, c: &GateConvParams| {
        dot(
            &g,
            sfglu_gate(z, s, &dist, c, &gate_cfg)
                .expect("valid gate")
                .as_slice(),
        )
    };
    let a = sfglu_backward(&z, &scores, &dist, &conv, &gate_cfg, &g)?;
    let fd_z = finite_diff_grad(
        |x| loss(&with_data(&z, x), &scores, &conv),
        z.as_slice(),
        cfg.step,
    );
    let fd_s = finite_diff_grad(
        |s| loss(&z, &SimilarityField(s.to_vec()), &conv),
        &scores.0,
        cfg.step,
    );
    let fd_w = finite_diff_grad(
        |w| {
            loss(
                &z,
                &scores,
                &GateConvParams::new(w.to_vec(), conv.bias.clone()).unwrap(),
            )
        },
        &conv.weight,
        cfg.step,
    );
    let fd_b = finite_diff_grad(
        |b| {
            loss(
                &z,
                &scores,
                &GateConvParams::new(conv.weight.clone(), b.to_vec()).unwrap(),
            )
        },
        &conv.bias,
        cfg.step,
    );
    Ok([
        max_relative_error(&a.z, &fd_z),
        max_relative_error(&a.scores, &fd_s),
        max_relative_error(&a.weight, &fd_w),
        max_relative_error(&a.bias, &fd_b),
    ]
    .into_iter()
    .fold(0.0, f64::max))
}

fn affine_with(p: &Affine, flat: &[f64]) -> Affine {
    let nw = p.weight.as_slice().len();
    let mut w = p.weight.clone();
    w.as_mut_slice().copy_from_slice(&flat[..nw]);
    Affine::new(w, flat[nw..].to_vec()).expect("shape is consistent")
}

fn affine_flat(p: &Affine) -> Vec<f64> {
    p.weight.as_slice().iter().chain(&p.bias).copied().collect()
}

pub fn glu_instance<R: Rng + ?Sized>(rng: &mut R, cfg: &GradcheckConfig) -> Result<f64> {
    let z = random_map(rng, cfg);
    let p = Affine::random(cfg.channels, cfg.channels, rng);
    let g = normal_vec(rng, z.as_slice().len());
    let loss =
        |z: &FeatureMap, p: &Affine| dot(&g, glu_baseline(z, p).expect("valid glu").as_slice());
    let (gz, gp) = glu_backward(&z, &p, &g)?;
    let fd_z = finite_diff_grad(|x| loss(&with_data(&z, x), &p), z.as_slice(), cfg.step);
    let fd_p = finite_diff_grad(
        |f| loss(&z, &affine_with(&p, f)),
        &affine_flat(&p),
        cfg.step,
    );
    let analytic_p: Vec<f64> = gp.weight.iter().chain(&gp.bias).copied().collect();
    Ok(max_relative_error(&gz, &fd_z).max(max_relative_error(&analytic_p, &fd_p)))
}

pub fn swiglu_instance<R: Rng + ?Sized>(rng: &mut R, cfg: &GradcheckConfig) -> Result<f64> {
    let z = random_map(rng, cfg);
    let p = SwiGluParams {
        value: Affine::random(cfg.channels, cfg.channels, rng),
        gate: Affine::random(cfg.channels, cfg.channels, rng),
    };
    let g = normal_vec(rng, z.as_slice().len());
    let loss = |z: &FeatureMap, p: &SwiGluParams| {
        dot(&g, swiglu_baseline(z, p).expect("valid swiglu").as_slice())
    };
    let (gz, gv, gg) = swiglu_backward(&z, &p, &g)?;
    let fd_z = finite_diff_grad(|x| loss(&with_data(&z, x), &p), z.as_slice(), cfg.step);
    let fd_v = finite_diff_grad(
        |f| {
            let q = SwiGluParams {
                value: affine_with(&p.value, f),
                gate: p.gate.clone(),
            };
            loss(&z, &q)
        },
        &affine_flat(&p.value),
        cfg.step,
    );
    let fd_g = finite_diff_grad(
        |f| {
            let q = SwiGluParams {
                value: p.value.clone(),
                gate: affine_with(&p.gate, f),
            };
            loss(&z, &q)
        },
        &affine_flat(&p.gate),
        cfg.step,
    );
    let av: Vec<f64> = gv.weight.iter().chain(&gv.bias).copied().collect();
    let ag: Vec<f64> = gg.weight.iter().chain(&gg.bias).copied().collect();
    Ok(max_relative_error(&gz, &fd_z)
        .max(max_relative_error(&av, &fd_v))
        .max(max_relative_error(&ag, &fd_g)))
}

fn run_suite<F>(
    name: &str,
    cfg: &GradcheckConfig,
    stream: u64,
    mut instance: F,
) -> Result<SuiteResult>
where
    F: FnMut(&mut ChaCha8Rng, usize) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let mut worst = (0, 0.0f64);
    for i in 0..cfg.instances {
        let e = instance(&mut rng, i)?;
        if e > worst.1 || e.is_nan() {
            worst = (i, e);
        }
    }
    Ok(SuiteResult {
        name: name.to_owned(),
        instances: cfg.instances,
        max_rel_error: worst.1,
        worst_instance: worst.0,
        passed: worst.1 <= cfg.tolerance,
    })
}

/// Runs the adapter, SF-GLU, GLU and SwiGLU suites. The adapter cycles
/// through the smooth activations.
pub fn run_all(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    const ACTIVATIONS: [Activation; 3] = [Activation::Silu, Activation::Tanh, Activation::Sigmoid];
    let suites = vec![
        run_suite("adapter", cfg, 1, |rng, i| {
            adapter_instance(rng, cfg, ACTIVATIONS[i % 3])
        })?,
        run_suite("sfglu", cfg, 2, |rng, _| sfglu_instance(rng, cfg))?,
        run_suite("glu", cfg, 3, |rng, _| glu_instance(rng, cfg))?,
        run_suite("swiglu", cfg, 4, |rng, _| swiglu_instance(rng, cfg))?,
    ];
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        suites,
    })
}
