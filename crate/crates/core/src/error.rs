use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid points per axis must be a power of two in [8, 8192], got {0}")]
    InvalidPointCount(usize),
    #[error("grid dimension must be 1, 2 or 3, got {0}")]
    InvalidDimension(usize),
    #[error("box length must be positive and finite, got {0}")]
    InvalidBoxLength(f64),
    #[error("operands live on different grids")]
    GridMismatch,
    #[error("{operation} requires a one-dimensional grid")]
    RequiresOneDimension { operation: &'static str },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("condensate is not normalized: ||phi||_2 = {norm}")]
    Unnormalized { norm: f64 },
    #[error("kernel carries a discrete delta; spectral differentiation along the first argument is undefined")]
    DeltaKernel,
    #[error("instability detected at t = {time}: {quantity} = {value:e} exceeds 1e6")]
    Instability { time: f64, quantity: &'static str, value: f64 },
    #[error("condensate trajectory covers [{start}, {end}] but t = {requested} was requested")]
    TrajectoryCoverage { start: f64, end: f64, requested: f64 },
    #[error("Fock basis dimension {dim} exceeds the limit of {limit}")]
    FockDimension { dim: usize, limit: usize },
    #[error("truncation leakage {leakage:e} exceeds {threshold:e}; increase the occupation cutoff")]
    Leakage { leakage: f64, threshold: f64 },
    #[error("norm drift {drift:e} per unit time exceeds the integrator guard; reduce dt")]
    IntegratorDrift { drift: f64 },
    #[error("series contains a nonpositive value {value} at t = {time}")]
    NonPositiveSeries { time: f64, value: f64 },
    #[error("decay fit needs at least 10 samples in the window, found {0}")]
    TooFewSamples(usize),
    #[error("series are misaligned: {0}")]
    Misaligned(String),
    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
