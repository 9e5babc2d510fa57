use thiserror::Error;

/// Errors produced by model construction, prior assembly, training and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty pair set for relation {0}")]
    EmptyPairSet(String),

    #[error("no source models given")]
    NoSources,

    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(String),

    #[error("eigenvalue {0:.3e} below factorization threshold")]
    EigenvalueBelowThreshold(f64),

    #[error("training set has no {0} examples")]
    EmptyClass(&'static str),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("empty ground-truth set: average precision is undefined")]
    EmptyGroundTruth,

    #[error("degenerate camera: {0}")]
    DegenerateCamera(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error("output {0} exists; pass --force to overwrite")]
    OutputExists(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
