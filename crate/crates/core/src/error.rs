use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CocaError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid time series: {0}")]
    InvalidSeries(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty batch: {0}")]
    EmptyBatch(String),
    #[error("cosine similarity undefined for a zero vector")]
    ZeroVector,
    #[error("variance undefined for a batch of {0} vectors (need at least 2)")]
    VarianceUndefined(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("objective variant {variant} cannot be evaluated on {source_kind} pairs")]
    VariantMismatch {
        variant: String,
        source_kind: String,
    },
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("center has not been frozen; train the model before scoring")]
    CenterNotFrozen,
    #[error("overlapping injections at points {0} and {1}")]
    OverlappingInjections(usize, usize),
    #[error("mixed metric protocols in aggregation: {0} and {1}")]
    MixedProtocols(String, String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("usage error: {0}")]
    Usage(String),
}

impl CocaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CocaError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CocaError>;
