use thiserror::Error;

/// Errors raised by the samplers, schedules and metrics.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid target model: {0}")]
    InvalidModel(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("score blow-up at (t = {t}, step = {step})")]
    ScoreBlowUp { t: f64, step: usize },

    #[error("corrector blow-up at (elapsed = {elapsed}, step = {step})")]
    CorrectorBlowUp { elapsed: f64, step: usize },

    #[error("degenerate noise covariance: {0}")]
    DegenerateNoiseCovariance(String),

    #[error("sample size too small: {n} < {min}")]
    SampleSizeTooSmall { n: usize, min: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl SamplerError {
    /// Numerical failures (as opposed to bad input) map to a distinct exit code in the CLI.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            SamplerError::ScoreBlowUp { .. }
                | SamplerError::CorrectorBlowUp { .. }
                | SamplerError::DegenerateNoiseCovariance(_)
                | SamplerError::InvalidState(_)
        )
    }
}

impl From<std::io::Error> for SamplerError {
    fn from(e: std::io::Error) -> Self {
        SamplerError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SamplerError>;
