use thiserror::Error;
use xct_tensor::TensorError;

#[derive(Debug, Error)]
pub enum XctError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch at {stage}: {detail}")]
    Shape { stage: &'static str, detail: String },

    #[error("{path}: {detail}")]
    Format { path: String, detail: String },

    #[error("model: {0}")]
    Model(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl XctError {
    /// Process exit code: 1 usage, 2 data, 3 model/training.
    pub fn exit_code(&self) -> i32 {
        match self {
            XctError::Usage(_) => 1,
            XctError::Invalid(_)
            | XctError::Shape { .. }
            | XctError::Format { .. }
            | XctError::Io(_)
            | XctError::Json(_) => 2,
            XctError::Model(_) | XctError::Tensor(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, XctError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(XctError::Invalid(msg.into()))
}

pub(crate) fn shape<T>(stage: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(XctError::Shape {
        stage,
        detail: detail.into(),
    })
}
