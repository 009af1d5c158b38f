use num_complex::Complex64;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("random network generation failed after {retries} attempts: {reason}")]
    GenerationFailed { retries: usize, reason: String },

    #[error("simulation diverged at step {step}")]
    SimulationDiverged { step: usize },

    #[error("Kalman filter diverged at step {step} (covariance norm {norm:e})")]
    FilterDiverged { step: usize, norm: f64 },

    #[error("output matrix C is rank deficient")]
    RankDeficient,

    #[error("could not find a pole-free evaluation point near q = {0}")]
    PoleHit(Complex64),

    #[error("signal power is zero")]
    ZeroSignal,

    #[error("network identifiability requires m = p (got m = {m}, p = {p})")]
    Identifiability { m: usize, p: usize },

    #[error("{location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
