use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("timestep {t} out of range [0, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("timestep ordering violated: next timestep {next} must be below {current}")]
    Ordering { current: usize, next: usize },

    #[error("division by zero: {0}")]
    DivisionByZero(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("prediction kinds differ: {0:?} vs {1:?}")]
    KindMismatch(crate::diffusion::PredictionKind, crate::diffusion::PredictionKind),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("input exhausted: {0}")]
    Exhausted(String),

    #[error("landmark error: {0}")]
    Landmark(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
