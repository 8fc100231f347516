use thiserror::Error;

/// Errors raised by the simulation and verification routines.
///
/// `InvalidParameter` messages name the violated bound in a form that is
/// stable enough to be matched by scripts (e.g. `sigma >= 2*sqrt(pi)`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {bound}")]
    InvalidParameter { name: &'static str, bound: String },

    #[error("geometry mismatch: fields live on different tori")]
    GeometryMismatch,

    #[error("scale {eps} is below grid resolution (minimum {min})")]
    Unresolvable { eps: f64, min: f64 },

    #[error("moment p = {p} is outside the finite regime (p < {limit})")]
    DivergentMoment { p: f64, limit: f64 },

    #[error("numerical blow-up at t = {t}: {reason}")]
    BlowUp { t: f64, reason: String },

    #[error("time grid mismatch: {0}")]
    TimeGrid(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, bound: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        bound: bound.into(),
    }
}
