use std::path::PathBuf;

use crate::train::Checkpoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("uninitialized state: {0}")]
    Uninitialized(String),

    #[error("non-deterministic function: {0}")]
    Determinism(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncation { expected: usize, actual: usize },

    #[error("split error: {0}")]
    Split(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged {
        step: u64,
        loss: f64,
        last_checkpoint: Box<Checkpoint>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad configuration rather than bad data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Mode(_) | Error::Split(_))
    }
}
