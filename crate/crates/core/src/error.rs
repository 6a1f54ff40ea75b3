//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operation expected an image with a different channel count.
    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    /// A parameter is outside its documented range (even window, zero clip limit, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Input data violates an operation precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Tensor / image dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A referenced entity (label, record, file) does not exist.
    #[error("not found: {0}")]
    NotFound(String),

    /// A class has too few records to split.
    #[error("stratification error: {0}")]
    Stratification(String),

    /// Operation called on an object in the wrong state (e.g. untrained model).
    #[error("state error: {0}")]
    State(String),

    /// Run configuration is inconsistent or incomplete.
    #[error("configuration error: {0}")]
    Config(String),

    /// Weight archive does not match the target network; lists every offender.
    #[error("weight load error: {}", .0.join("; "))]
    WeightLoad(Vec<String>),

    /// Training diverged (non-finite loss).
    #[error("training error at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code class: 1 usage, 2 data, 3 model/state.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_) | Error::Config(_) => 1,
            Error::ChannelMismatch { .. }
            | Error::InvalidInput(_)
            | Error::NotFound(_)
            | Error::Stratification(_)
            | Error::Io(_)
            | Error::Image(_)
            | Error::Json(_) => 2,
            Error::ShapeMismatch(_)
            | Error::State(_)
            | Error::WeightLoad(_)
            | Error::Training { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
