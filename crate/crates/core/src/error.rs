use thiserror::Error;

use crate::ingest::IngestError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mask selects no rows")]
    EmptySubset,
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("dataset is missing `{0}` metadata")]
    MissingMetadata(&'static str),
    #[error("environment {0} has no samples")]
    EmptyEnvironment(usize),
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("all per-sample gradients are zero; environment inference is degenerate")]
    DegenerateGradients,
    #[error("exhaustive search over {0} samples is too large (limit 20)")]
    TooLarge(usize),
    #[error("inferred minority environment is empty")]
    MinorityEmpty,
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("task mismatch: {0}")]
    TaskMismatch(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
