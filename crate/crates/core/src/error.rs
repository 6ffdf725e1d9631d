use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("point ({x}, {y}, {z}) lies outside the domain")]
    OutsideDomain { x: f64, y: f64, z: f64 },

    #[error("wavelength {0} nm outside table support")]
    WavelengthOutOfRange(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("table parse error at line {line}: {msg}")]
    TableParse { line: usize, msg: String },

    #[error("solver did not converge for wavelength index {index}: relative residual {relres:.3e}")]
    NotConverged { index: usize, relres: f64 },

    #[error("field solve failed ({what}, wavelength index {index}): {source}")]
    FieldSolve {
        what: String,
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("compression failed at node {path}: {source}")]
    Compression {
        path: String,
        #[source]
        source: Box<Error>,
    },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
