//! Flat key/value config file shared by the subcommands.
//!
//! ```toml
//! scenes = 24
//! camouflage = 0.8
//! decoy_fraction = 0.3
//! fusions = ["sum_normalize", "contrastive"]
//! gates = ["none", "sfglu"]
//! lambdas = [0.0, 5.0]
//! ```

use std::path::Path;

use camodet_core::gradcheck::GradcheckConfig;
use camodet_core::synth::BenchConfig;
use camodet_core::{Error, FusionVariant, GateVariant, Result};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,

    pub embedding_dim: Option<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub channels: Option<usize>,
    pub num_classes: Option<usize>,
    pub sub_descriptions_per_class: Option<usize>,
    pub camouflage: Option<f64>,
    pub camouflage_jitter: Option<f64>,
    pub decoy_fraction: Option<f64>,
    pub scenes: Option<usize>,
    pub objects_per_scene: Option<usize>,
    pub object_size_min: Option<usize>,
    pub object_size_max: Option<usize>,
    pub patch_noise: Option<f64>,
    pub text_noise: Option<f64>,
    pub patch_pixels: Option<usize>,

    pub seeds: Option<usize>,
    pub fusions: Option<Vec<String>>,
    pub gates: Option<Vec<String>>,
    pub lambdas: Option<Vec<f64>>,
    pub lambda: Option<f64>,
    pub svd_rank_min: Option<usize>,
    pub svd_rank_max: Option<usize>,
    pub temperature: Option<f64>,
    pub alpha: Option<f64>,
    pub epsilon: Option<f64>,
    pub gate_weight: Option<f64>,
    pub gate_bias: Option<f64>,
    pub readout_gain: Option<f64>,
    pub readout_offset: Option<f64>,
    pub score_threshold: Option<f64>,
    pub win_fraction: Option<f64>,

    pub instances: Option<usize>,
    pub tolerance: Option<f64>,
    pub step: Option<f64>,

    pub min_phrases: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }

    pub fn apply_bench(&self, cfg: &mut BenchConfig) -> Result<()> {
        let s = &mut cfg.synth;
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(s.embedding_dim, self.embedding_dim);
        set!(s.height, self.height);
        set!(s.width, self.width);
        set!(s.channels, self.channels.or(self.embedding_dim));
        set!(s.num_classes, self.num_classes);
        set!(
            s.sub_descriptions_per_class,
            self.sub_descriptions_per_class
        );
        set!(s.camouflage, self.camouflage);
        set!(s.camouflage_jitter, self.camouflage_jitter);
        set!(s.decoy_fraction, self.decoy_fraction);
        set!(s.scenes, self.scenes);
        set!(s.objects_per_scene, self.objects_per_scene);
        set!(s.object_size_min, self.object_size_min);
        set!(s.object_size_max, self.object_size_max);
        set!(s.patch_noise, self.patch_noise);
        set!(s.text_noise, self.text_noise);
        set!(s.patch_pixels, self.patch_pixels);

        let b = &mut cfg.base;
        set!(b.lambda, self.lambda);
        set!(b.svd_rank.min, self.svd_rank_min);
        set!(b.svd_rank.max, self.svd_rank_max);
        set!(b.gate_config.temperature, self.temperature);
        set!(b.gate_config.alpha, self.alpha);
        set!(b.gate_config.epsilon, self.epsilon);
        set!(b.gate_weight, self.gate_weight);
        set!(b.gate_bias, self.gate_bias);
        set!(b.readout_gain, self.readout_gain);
        set!(b.readout_offset, self.readout_offset);
        set!(b.score_threshold, self.score_threshold);
        set!(cfg.win_fraction, self.win_fraction);

        if let Some(f) = &self.fusions {
            cfg.fusions = f
                .iter()
                .map(|v| v.parse())
                .collect::<Result<Vec<FusionVariant>>>()?;
        }
        if let Some(g) = &self.gates {
            cfg.gates = g
                .iter()
                .map(|v| v.parse())
                .collect::<Result<Vec<GateVariant>>>()?;
        }
        set!(cfg.lambdas, self.lambdas.clone());
        if let Some(n) = self.seeds {
            let base = self.seed.unwrap_or(0);
            cfg.seeds = (base..base + n as u64).collect();
        } else if let Some(base) = self.seed {
            let n = cfg.seeds.len() as u64;
            cfg.seeds = (base..base + n).collect();
        }
        Ok(())
    }

    pub fn apply_gradcheck(&self, cfg: &mut GradcheckConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.instances {
            cfg.instances = v;
        }
        if let Some(v) = self.tolerance {
            cfg.tolerance = v;
        }
        if let Some(v) = self.step {
            cfg.step = v;
        }
    }
}
