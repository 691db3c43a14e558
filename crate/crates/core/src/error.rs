use thiserror::Error;

/// Errors raised by the numerical routines in this crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("x = {x} lies outside the domain [{min}, {max}]")]
    OutsideDomain { x: f64, min: f64, max: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("geodesic shooting did not converge after {iterations} iterations (endpoint residual {residual:.3e})")]
    ShootingFailed { iterations: usize, residual: f64 },

    #[error("geodesic left the domain [{min}, {max}] (reached x = {x})")]
    GeodesicLeftDomain { x: f64, min: f64, max: f64 },

    #[error("mode index {k} exceeds the cutoff k_max = {k_max}")]
    ModeCutoff { k: i64, k_max: i64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("path budget exceeded: {paths} paths requested, budget is {budget}")]
    BudgetExceeded { paths: u128, budget: u128 },

    #[error("grid/step compatibility violated: m dx^2 / (2 hbar eps) = {ratio:.4} > pi/3")]
    KineticPhaseUnresolved { ratio: f64 },

    #[error("boundary contamination: |psi| at the x-boundary is {ratio:.3e} of the peak")]
    BoundaryContamination { ratio: f64 },

    #[error("eta left the grid range [{min}, {max}] (needed {needed})")]
    EtaOverflow { min: f64, max: f64, needed: f64 },

    #[error("tridiagonal solve failed: zero pivot at row {row}")]
    SingularSystem { row: usize },

    #[error("regulator extrapolation failed: {0}")]
    Extrapolation(String),

    #[error("mode-sum tail {tail:.3e} exceeds tolerance {tolerance:.3e}")]
    TruncationTail { tail: f64, tolerance: f64 },

    #[error("{0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn param(name: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name: name.to_string(), reason: reason.into() }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
