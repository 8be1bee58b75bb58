use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violated: {0}")]
    Contract(String),

    /// Regularized incomplete gamma failed to converge.
    #[error("incomplete gamma did not converge at a = {a}, x = {x}")]
    IncompleteGamma { a: f64, x: f64 },

    #[error("non-finite loss at step {step} (term: {term})")]
    NonFinite { step: usize, term: String },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
