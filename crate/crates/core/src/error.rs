use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid weight matrix: {0}")]
    InvalidWeights(String),

    #[error("invalid Laplacian: {0}")]
    InvalidLaplacian(String),

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("time {t} outside schedule horizon {horizon}")]
    BeyondHorizon { t: f64, horizon: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite state at t = {t}: {detail}")]
    NonFinite { t: f64, detail: String },

    #[error("trajectory does not cover [{from}, {to}] (ends at {end})")]
    InsufficientHorizon { from: f64, to: f64, end: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
