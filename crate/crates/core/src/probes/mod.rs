//! Downstream evaluation harness: feature extraction and combination,
//! linear probing, cross-modal retrieval metrics, and the shot-sequence
//! ordering / next-shot selection tasks.
//!
//! Evaluation always runs the backbone without masking, so every probe input
//! is deterministic given a checkpoint.

mod features;
mod linear;
mod retrieval;
mod tasks;

pub use features::{encode_samples, feature_vector, per_shot_rows, FeatureKind, FeatureSpec, SampleEncoding};
pub use linear::{linear_probe, ProbeDataset, ProbeMetric, ProbeOutcome, ProbeTargets};
pub use retrieval::{retrieval_eval, RetrievalReport};
pub use tasks::{
    apply_permutation, invert_permutation, nss_task, sso_task, NssScorer, TaskFeatures,
    TaskOutcome, PERMUTATIONS_3,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("probe: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ProbeError>;
