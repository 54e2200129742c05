use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric (relative asymmetry {0:e})")]
    NonSymmetric(f64),

    #[error("symmetric eigensolver failed to converge")]
    ConvergenceFailure,

    #[error("evaluation point {point} is not above the retained spectrum (largest eigenvalue {max})")]
    PoleViolation { point: f64, max: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("spike count {k} must be smaller than the dimension {m}")]
    SpikeCountTooLarge { k: usize, m: usize },

    #[error("spikes {first} and {second} are equal within tolerance; pass force to override")]
    EqualSpikes { first: usize, second: usize },

    #[error("spike {0} is not detectable above the bulk")]
    NonDetectable(usize),

    #[error("dimension {0} is too small for this operation")]
    DimensionTooSmall(usize),

    #[error("division by zero: {0}")]
    DivisionByZero(&'static str),

    #[error("populations were fitted with different spike counts ({x} and {y})")]
    MismatchedK { x: usize, y: usize },

    #[error("covariance of the statistic is singular (condition number {0:e})")]
    SingularCovariance(f64),

    #[error("method {0} needs a null calibration")]
    MissingCalibration(String),

    #[error("calibration needs at least {min} replications, got {reps}")]
    InsufficientReps { reps: usize, min: usize },

    #[error("vectors are not orthonormal (max deviation {0:e})")]
    NotOrthonormal(f64),

    #[error("calibration does not match: {0}")]
    CalibrationMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
