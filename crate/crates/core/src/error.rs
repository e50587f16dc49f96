use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("gradient root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("node {0} is not part of this graph")]
    UnknownNode(usize),

    #[error("no binding supplied for parameter node {0}")]
    UnboundParameter(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training fault at step {step}: {reason}")]
    TrainingFault { step: usize, reason: String },

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
