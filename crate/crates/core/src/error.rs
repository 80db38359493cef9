use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("unsupported quadrature precision {0} (supported: 3, 7)")]
    UnsupportedPrecision(usize),

    #[error("vertex {vertex} does not belong to element {element}")]
    VertexNotInElement { vertex: usize, element: usize },

    #[error("training diverged at epoch {epoch}: R_h = {r_h:e} exceeds guard {guard:e}")]
    Diverged { epoch: usize, r_h: f64, guard: f64 },

    #[error("problem has no exact solution")]
    MissingExactSolution,

    #[error("slope fit rejected: {0}")]
    DegenerateFit(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Returns `Err(NonFinite)` when `value` is NaN or infinite.
pub(crate) fn ensure_finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
