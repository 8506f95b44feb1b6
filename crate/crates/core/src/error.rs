use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("integration diverged at step {step} (t = {t})")]
    IntegrationDiverged { step: usize, t: f64 },

    #[error("rotation angle {angle} is too close to pi for a unique logarithm")]
    AngleNearPi { angle: f64 },

    #[error("projection onto SO(3) failed: {0}")]
    ProjectionFailed(String),

    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),

    #[error("least-squares problem is rank deficient (nullspace dimension {nullspace})")]
    RankDeficient { nullspace: usize },

    #[error("weighted estimation requires a zero feedforward term D(t)")]
    UnsupportedFeedforward,

    #[error("observer step {step} failed: {reason}")]
    StepFailed { step: usize, reason: String },

    #[error("solver did not converge after {iterations} iterations (final cost {cost:e})")]
    NoConvergence { iterations: usize, cost: f64 },

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}
