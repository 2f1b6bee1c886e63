use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("rank-deficient system: {0}")]
    RankDeficient(String),

    #[error("no convergence after {iterations} iterations")]
    NotConverged { iterations: usize, last: Vec<f64> },

    #[error("perfect separation detected: {0}; retry with a ridge penalty or a forest learner")]
    Separation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("degenerate instrument: {0}")]
    DegenerateInstrument(String),

    #[error("empty stratum: {0}")]
    EmptyStratum(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        Error::Io(err.to_string())
    }
}
