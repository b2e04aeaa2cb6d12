use thiserror::Error;

use crate::calendar::Month;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] icemamba_tensor::TensorError),

    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: &'static str, detail: String },

    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },

    #[error("bad magic: not an {0} file")]
    BadMagic(&'static str),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("header mismatch: {0}")]
    HeaderMismatch(String),

    #[error("missing data for {variable} at {month}")]
    MissingMonth { variable: String, month: Month },

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("zero standard deviation for variable {0}")]
    ZeroStd(String),

    #[error("non-finite {what} at {location}")]
    NonFinite { what: &'static str, location: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid { what, detail: detail.into() }
    }

    pub(crate) fn shape(context: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { context, detail: detail.into() }
    }

    /// True for failures caused by numerics (NaN/Inf) rather than inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Tensor(icemamba_tensor::TensorError::NonFinite { .. })
        )
    }
}
