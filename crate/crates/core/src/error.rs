use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate direction: Frobenius norm {norm:e} is at or below eps {eps:e}")]
    DegenerateDirection { norm: f64, eps: f64 },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid dataset spec: {0}")]
    Spec(String),

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("merge certification failed: max relative deviation {deviation:e} exceeds {tolerance:e}")]
    MergeIntegrity { deviation: f64, tolerance: f64 },

    #[error("model is already merged")]
    AlreadyMerged,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("invalid checkpoint: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
