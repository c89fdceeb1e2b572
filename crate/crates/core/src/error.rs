//! Common error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Non-finite or otherwise malformed input data.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Points outside the camera frustum where in-frustum coordinates are required.
    #[error("frustum violation at point indices {indices:?}: {detail}")]
    FrustumViolation { indices: Vec<usize>, detail: String },

    /// Dataset statistics cannot be computed (e.g. zero variance).
    #[error("degenerate data: {0}")]
    DegenerateData(String),

    /// Depth map contains non-positive entries.
    #[error("invalid depth: {0}")]
    InvalidDepth(String),

    /// Mismatched or out-of-range sizes/counts.
    #[error("size error: {0}")]
    SizeError(String),

    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    DomainError(String),

    /// Shape or layout mismatch between structured containers.
    #[error("structural error: {0}")]
    StructuralError(String),

    /// Loss became non-finite during training.
    #[error("training divergence: {0}")]
    TrainingDivergence(String),

    /// Non-finite activation inside the score network.
    #[error("numerical failure in layer {layer}: {detail}")]
    NumericalFailure { layer: usize, detail: String },

    /// Sampler state became non-finite.
    #[error("sampler divergence at step {step} (sigma {sigma}): state non-finite")]
    SamplerDivergence { step: usize, sigma: f64 },

    /// API misuse (missing conditioning, bad upsampling request, ...).
    #[error("usage error: {0}")]
    UsageError(String),

    /// ICP could not recover a transform (rank-deficient configuration).
    #[error("alignment failure: {0}")]
    AlignmentFailure(String),

    /// File has the wrong magic bytes.
    #[error("magic mismatch: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: String, found: String },

    /// Unsupported container version.
    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    /// Payload shorter than the header promises.
    #[error("truncated file: {0}")]
    Truncated(String),

    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
