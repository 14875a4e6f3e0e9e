use thiserror::Error;

/// Errors raised by the simulation, imputation and estimation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid condition: {0}")]
    InvalidCondition(String),

    #[error("transition matrix is not stationary (spectral radius {0:.6} >= 1)")]
    NonStationary(f64),

    #[error("invalid model parameters: {0}")]
    InvalidParams(String),

    #[error("series already carries a missingness mask; mechanisms are not composable")]
    AlreadyMasked,

    #[error("latent-state ground truth is required by this mechanism")]
    MissingTruth,

    #[error("mechanism {0} is not handled by this operation")]
    MechanismMismatch(String),

    #[error("intercept search does not bracket target rate {target}: rate({lo}) = {rate_lo:.4}, rate({hi}) = {rate_hi:.4}")]
    NonBracketing {
        target: f64,
        lo: f64,
        hi: f64,
        rate_lo: f64,
        rate_hi: f64,
    },

    #[error("innovation covariance is not invertible (timepoint {0:?})")]
    SingularInnovation(Option<usize>),

    #[error("column {column} has {observed} observed values, at least {required} required")]
    InsufficientObserved {
        column: usize,
        observed: usize,
        required: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;
