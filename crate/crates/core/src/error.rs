use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cube depth {depth} exceeds the finest grid level {finest}")]
    DepthOverflow { depth: u32, finest: u32 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("kernel on {cube} violates {axiom}: {detail}")]
    AxiomViolation {
        cube: String,
        axiom: &'static str,
        detail: String,
    },

    #[error("cube collection is not admissible: {0}")]
    Collection(String),

    #[error("exact enumeration over {count} kernel cubes exceeds the limit {limit}")]
    TooManyKernels { count: usize, limit: usize },

    #[error("shift is not cancellative: {0}")]
    NotCancellative(String),

    #[error("operator of size {size} exceeds the limit {limit}")]
    SizeOverflow { size: usize, limit: usize },

    #[error("iteration did not converge: {0}")]
    NonConvergence(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}
