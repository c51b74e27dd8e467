use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error at line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("derivative order {0} exceeds the supported maximum of 4")]
    DerivativeOrder(usize),

    #[error("direction is not a unit vector (|omega| = {0})")]
    NonUnitDirection(f64),

    #[error("quadrature did not converge: refinement changed {what} by {diff:e} (tol {tol:e})")]
    QuadratureNotConverged { what: String, diff: f64, tol: f64 },

    #[error("nondegeneracy condition fails: {0}")]
    NdFailed(String),

    #[error("label inversion failed: {0}")]
    Inversion(String),

    #[error("rate fit rejected: {0}")]
    RateFit(String),

    #[error("blowup imminent at t = {t}: {reason} near ({x1}, {x2})")]
    BlowupImminent { t: f64, x1: f64, x2: f64, reason: String },

    #[error("regression needs at least 3 usable points, got {0}")]
    TooFewPoints(usize),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config_line(line: usize, msg: impl Into<String>) -> Self {
        Error::ConfigLine {
            line,
            msg: msg.into(),
        }
    }
}
