//! Specificity-driven text fusion, region alignment and spatially focused
//! gating for open-vocabulary camouflaged object detection, plus the dataset
//! toolchain, a COCO-style evaluator and a synthetic benchmark.

// `!(x > eps)` guards are deliberate: they reject NaN along with small values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod dataset;
pub mod embfile;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod numerics;
pub mod sfglu;
pub mod synth;
pub mod textfusion;

pub use alignment::{AlignmentConfig, BBox, CoveragePair, EmbeddingField};
pub use dataset::{DifficultyLevel, LabelRecord, MaskImage};
pub use error::{Error, Result};
pub use eval::{DetectionRecord, EvalReport, GroundTruthRecord};
pub use numerics::{Affine, Matrix};
pub use sfglu::{FeatureMap, GateConfig, GateConvParams, GateVariant, SimilarityField};
pub use textfusion::{
    AdapterParams, FusedClassEmbedding, FusionVariant, FusionWeights, SubDescriptionSet, SvdRank,
};
