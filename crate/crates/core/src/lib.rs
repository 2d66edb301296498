//! Attribute-aware pooling (AAP) for multi-attribute classification.
//!
//! Label co-occurrence statistics ([`priors`]) turn the outputs of the other
//! branches of a multi-branch network into an auxiliary estimate for each
//! branch ([`aap`]). The crate also carries a small trainable network
//! ([`model`]), a synthetic entangled-attribute task ([`data`]), the usual
//! multi-label metrics ([`metrics`]) and the ablation harness
//! ([`experiment`]).

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aap;
pub mod data;
pub mod error;
pub mod experiment;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod priors;

pub use aap::{
    aap_backward, aap_forward, aap_loss, finite_difference_grad, run_gradcheck, AapConfig, AapForwardCache,
    BranchProbabilities, GradcheckReport, GradcheckSpec,
};
pub use data::{Dataset, Split, SyntheticSpec, SyntheticSplits};
pub use error::{AapError, Result};
pub use matrix::Matrix;
pub use metrics::{MetricsReport, Thresholds};
pub use model::{
    weight_gradcheck, Arm, BaselineNet, Model, ModelConfig, MultiBranchNet, TrainConfig, WeightGradcheckSpec,
};
pub use priors::{AttributeSchema, CoOccurrencePriors, LabelMatrix};
