//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("configuration errors:\n{}", .0.join("\n"))]
    ConfigViolations(Vec<String>),

    #[error("{what} not found: run `{stage}` first")]
    MissingArtifact { what: String, stage: String },

    #[error("no activation statistics for parameter {0}")]
    MissingStats(String),

    #[error("degenerate language spec: {0}")]
    DegenerateSpec(String),

    #[error("source and target corpora are not distinguishable (unigram TV distance {tv:.4} < {min:.2})")]
    Indistinguishable { tv: f64, min: f64 },

    #[error("corpus too small: {0}")]
    CorpusTooSmall(String),

    #[error("training diverged at step {step}{}", .last_checkpoint.as_ref().map(|p| format!("; last good checkpoint: {p}")).unwrap_or_default())]
    Diverged {
        step: usize,
        last_checkpoint: Option<String>,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
