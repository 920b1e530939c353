//! One-shot probing of a vision-language embedding model.
//!
//! A single labelled image per class is captioned by an LLM, which also
//! writes counterfactual "hard negative" captions. The model under evaluation
//! scores the image against those captions and against plain label prompts,
//! and a ridge regressor maps the resulting similarity features to the
//! model's expected zero-shot accuracy on the whole dataset.
//!
//! Module map:
//!
//! - [`vector`]: unit-norm embeddings and cosine similarity.
//! - [`dataset`]: manifests, probe-image selection, other-label sampling.
//! - [`captiongen`]: LLM client, prompt templates, caption bundles.
//! - [`embedder`]: mock, remote and local embedding backends plus the binary cache.
//! - [`features`]: similarity feature rows and design matrices.
//! - [`regressor`]: closed-form ridge regression and lambda selection.
//! - [`zeroshot`]: ground-truth zero-shot accuracy of a backend.
//! - [`metrics`]: Pearson-r and RMSE.
//! - [`pipeline`]: compositions used by the CLI (train, predict, ablate).
//! - [`synthetic`]: offline corpus generator for the mock backend.

pub mod captiongen;
pub mod dataset;
pub mod embedder;
pub mod features;
pub mod metrics;
pub mod pipeline;
pub mod regressor;
mod rng;
pub mod synthetic;
pub mod vector;
pub mod zeroshot;

pub use captiongen::{CaptionBundle, LlmConfig};
pub use dataset::{DatasetManifest, ProbeImage, Split};
pub use embedder::{BackendDescriptor, BackendKind, EmbeddingBackend, MockSpec};
pub use features::{AggregationMode, FeatureRow, Variant};
pub use metrics::{EvalPairs, Units};
pub use regressor::{DatasetPrediction, RegressionModel};
pub use vector::{cosine_sim, normalize, EmbeddingVector, SimilarityScore};
pub use zeroshot::ZeroShotReport;

/// Coarse error class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Data,
    Network,
    Internal,
}

/// Errors that know which [`Category`] they belong to.
pub trait Categorized {
    fn category(&self) -> Category;
}

/// Version tag for the column order documented in [`features`].
pub const FEATURE_ORDER_VERSION: &str = "v1";

/// Schema version written into every JSON artifact.
pub const SCHEMA_VERSION: u32 = 1;
