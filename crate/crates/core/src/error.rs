use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by failure class so callers (notably the CLI) can map
/// them onto exit codes: invalid configuration, bad data, or numerical failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index out of bounds: {0}")]
    IndexOutOfBounds(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bounding box mismatch: {0}")]
    BboxMismatch(String),

    #[error("unknown patient id: {0}")]
    UnknownPatient(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("non-finite gradient in {0}; optimizer step rejected")]
    NonFiniteGradient(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("iteration diverged: residual grew {factor:.1}x from its minimum after {iters} iterations")]
    Divergence {
        factor: f64,
        iters: usize,
        residual_history: Vec<f64>,
    },

    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
