//! Ensembles of weak verifiers for best-of-K response selection.
//!
//! Verifier scores are binarized into votes, per-verifier accuracies are
//! estimated without labels by matching pairwise vote moments under a
//! conditionally independent latent-variable model, and each response is
//! scored by its posterior probability of being correct. The crate also covers
//! the baselines, coverage metrics and scaling-curve fits used to evaluate the
//! selection.
//!
//! Numerical code is generic over [`Real`] (`f32` or `f64`); the aliases at the
//! crate root fix the scalar for common use.

pub mod baselines;
pub mod clustering;
pub mod datastore;
pub mod error;
pub mod evaluation;
pub mod pipeline;
pub mod preprocess;
pub mod scalar;
pub mod scaling;
pub mod stats;
pub mod synth;
pub mod ws;

pub use datastore::{
    load_dataset, save_dataset, split_dev, validate, DataFormat, DatasetBundle, LabelSet, ScoreTensor, VerifierKind,
    VerifierMeta,
};
pub use error::{Error, Result};
pub use evaluation::{pass_at_k, success_rate, MetricsReport};
pub use pipeline::{run_weaver, FitArtifact, Strategy, WeaverConfig, WeaverRun};
pub use preprocess::{BinarizationStrategy, NormalizationSpec, PreprocessConfig, VoteTensor};
pub use scalar::Real;
pub use scaling::{CurveForm, CurvePoint, ScalingFit};
pub use ws::{FitConfig, FitOutcome, MomentMatrices, SelectionResult, WSParams};

pub type ScoreTensor64 = ScoreTensor<f64>;
pub type ScoreTensor32 = ScoreTensor<f32>;
pub type DatasetBundle64 = DatasetBundle<f64>;
pub type DatasetBundle32 = DatasetBundle<f32>;
pub type WSParams64 = WSParams<f64>;
pub type WSParams32 = WSParams<f32>;
pub type MomentMatrices64 = MomentMatrices<f64>;
pub type MomentMatrices32 = MomentMatrices<f32>;
pub type FitOutcome64 = FitOutcome<f64>;
pub type FitOutcome32 = FitOutcome<f32>;
pub type WeaverRun64 = WeaverRun<f64>;
pub type WeaverRun32 = WeaverRun<f32>;
pub type ScalingFit64 = ScalingFit<f64>;
pub type ScalingFit32 = ScalingFit<f32>;
pub type CurvePoint64 = CurvePoint<f64>;
pub type CurvePoint32 = CurvePoint<f32>;
