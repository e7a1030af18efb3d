use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the augmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("timestep order violated: from {from} to {to}")]
    TimestepOrder { from: usize, to: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("training did not converge: final running loss {loss:.4} above threshold {threshold:.4}")]
    NotConverged { loss: f64, threshold: f64 },

    #[error("non-finite latent for {0}")]
    NonFinite(String),

    #[error("unknown {kind} id {id}")]
    UnknownId { kind: &'static str, id: usize },

    #[error("tensor container: {0}")]
    Container(String),

    #[error("hash mismatch for `{name}`")]
    HashMismatch { name: String },

    #[error("config `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("missing artifact {path} (run stage `{stage}` first)")]
    MissingArtifact { stage: &'static str, path: PathBuf },

    #[error("suffix service: {0}")]
    Service(String),

    #[error("malformed suffix response: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::TimestepOutOfRange { .. } => "timestep_out_of_range",
            Error::TimestepOrder { .. } => "timestep_order",
            Error::Degenerate(_) => "degenerate",
            Error::Empty(_) => "empty",
            Error::Diverged { .. } => "diverged",
            Error::NotConverged { .. } => "not_converged",
            Error::NonFinite(_) => "non_finite",
            Error::UnknownId { .. } => "unknown_id",
            Error::Container(_) => "container",
            Error::HashMismatch { .. } => "hash_mismatch",
            Error::Config { .. } => "config",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::Service(_) => "service",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
