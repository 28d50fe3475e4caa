use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate node: training labels contain a single class")]
    DegenerateNode,

    #[error("ill-conditioned kernel matrix (jitter reached {jitter:e})")]
    IllConditioned { jitter: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("classes absent from training data: {0:?}")]
    MissingClasses(Vec<usize>),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("malformed packed file: {0}")]
    Format(String),

    #[error("no rows")]
    NoRows,

    #[error("incompatible model and data: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
