use std::io;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("row {row} has no valid positions")]
    DegenerateRow { row: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("token {token} is outside a vocabulary of size {size}")]
    Vocabulary { token: usize, size: usize },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("requested {requested} negatives but only {available} are available")]
    Exhausted { requested: usize, available: usize },

    #[error("AUC is undefined when labels contain a single class")]
    AucUndefined,

    #[error("raw coordinates are unavailable: {0}")]
    Unavailable(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Vocabulary { .. }
                | Error::Exhausted { .. }
                | Error::Unavailable(_)
                | Error::Format(_)
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
