use thiserror::Error;

/// Errors raised by the numerical routines.
///
/// Validation of [`crate::model::ModelParams`] never produces an error; it
/// returns a [`crate::model::ValidationReport`] that callers inspect.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unknown model id {0:?}")]
    UnknownModel(String),

    #[error("gamma = {gamma} outside (0, {upper})")]
    InvalidGamma { gamma: f64, upper: f64 },

    #[error("log barrier is singular at (y1^2+y2^2)^2+y3^2 = 0")]
    SingularPoint,

    #[error("non-finite sample after {step} steps (chain {chain}); reduce dt")]
    NumericalBlowup { chain: u64, step: u64 },

    #[error("no convergence after {iterations} iterations, residual {residual:e}")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("time step {dt:e} violates the stability bound {bound:e}")]
    InvalidTimestep { dt: f64, bound: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
