//! Error type shared across the crate.
//!
//! Variants are grouped by how the CLI maps them to exit codes: usage and
//! configuration problems, data problems (inputs, manifests, checkpoints),
//! and numeric failures.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PetalError {
    /// Invalid configuration: bad rank, unknown site, malformed run config.
    #[error("config error: {0}")]
    Config(String),

    /// Shape mismatch between tensors or between model and inputs.
    #[error("shape error: {0}")]
    Shape(String),

    /// Gate produced an alpha outside the tolerated range.
    #[error("gating error: {0}")]
    Gating(String),

    /// Bad input data: empty image, label out of range, missing split.
    #[error("input error: {0}")]
    Input(String),

    /// Manifest violates its contract (missing file, bad record, split leak).
    #[error("manifest error: {0}")]
    Manifest(String),

    /// Checkpoint does not match the model it is being loaded onto.
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    /// Checkpoint bytes are self-inconsistent or truncated.
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    /// Evaluation protocol violated (e.g. probe identity absent from gallery).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Non-finite values, zero norms, degenerate numeric situations.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// API misuse, e.g. stripping adapters from an already stripped model.
    #[error("state error: {0}")]
    State(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl PetalError {
    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            PetalError::Config(_) | PetalError::State(_) => 1,
            PetalError::Shape(_)
            | PetalError::Gating(_)
            | PetalError::Input(_)
            | PetalError::Manifest(_)
            | PetalError::Incompatible(_)
            | PetalError::Corrupt(_)
            | PetalError::Protocol(_)
            | PetalError::Io(_)
            | PetalError::Json(_)
            | PetalError::Image(_) => 2,
            PetalError::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, PetalError>;
