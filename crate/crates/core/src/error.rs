use thiserror::Error;

/// Errors raised by measure construction, the dual machinery and the oracles.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("weight {index} is negative ({value})")]
    NegativeWeight { index: usize, value: f64 },

    #[error("measure has no positive weight")]
    EmptySupport,

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("measures do not share a support ({left} vs {right} atoms)")]
    SupportMismatch { left: usize, right: usize },

    #[error("atom {index} has positive mass but zero reference mass")]
    AbsoluteContinuityViolation { index: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// An exponent exceeded the overflow guard; the step size is too large.
    #[error("divergence detected: exponent {exponent:.3e} exceeds guard")]
    DivergenceDetected { exponent: f64 },

    #[error("pseudo-inverse prior has nonpositive entry {index} ({value:.3e})")]
    NonpositivePrior { index: usize, value: f64 },

    #[error("closed-form mixture weight {index} is negative ({value:.3e})")]
    NegativeTheta { index: usize, value: f64 },

    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    MaxIterExceeded { iterations: usize, residual: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("malformed input: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
