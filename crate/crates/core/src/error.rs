use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} = {value} is outside the domain [{lo}, {hi}]")]
    Domain {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("perturbation kernel is degenerate at s = {0}: zero variance leaves the conditional score undefined")]
    DegenerateKernel(f64),

    #[error("covariance is not positive definite")]
    NotPositiveDefinite,

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("capability error: {0}")]
    Capability(String),

    #[error(
        "Novikov surrogate violated on path {path} at step {step}: running integrand {value:e} exceeds the overflow guard"
    )]
    Novikov { path: usize, step: usize, value: f64 },

    #[error("{rejected} of {total} paths were rejected as non-finite (limit 1%)")]
    TooManyRejections { rejected: usize, total: usize },

    #[error("non-finite training loss at iteration {iter} (config {config_hash})")]
    Diverged { iter: usize, config_hash: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_domain(what: &'static str, value: f64, lo: f64, hi: f64) -> Result<()> {
    if value.is_nan() || value < lo || value > hi {
        return Err(Error::Domain { what, value, lo, hi });
    }
    Ok(())
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
