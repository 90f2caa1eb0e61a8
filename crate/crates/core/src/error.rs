use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not symmetric: max asymmetry {asymmetry:e} exceeds {tolerance:e}")]
    SymmetryViolation { asymmetry: f64, tolerance: f64 },

    #[error("clamped spectrum is singular: eigenvalue {value:e} at index {index}")]
    Singular { index: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("point is outside the feasible set (violation {violation:e})")]
    Infeasible { violation: f64 },

    #[error("reference oracle unavailable: {0}")]
    OracleUnavailable(String),

    #[error("lower level appears unbounded below: {0}")]
    UnboundedBelow(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite iterate at t = {t}")]
    NonFinite { t: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn non_finite_input(what: &str) -> Self {
        Error::InvalidInput(format!("{what} has non-finite entries"))
    }

    /// True for errors caused by NaN or infinite numbers.
    pub fn is_non_finite(&self) -> bool {
        match self {
            Error::NonFinite { .. } => true,
            Error::InvalidInput(msg) => msg.ends_with("has non-finite entries"),
            _ => false,
        }
    }
}
