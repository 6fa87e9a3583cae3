use thiserror::Error;

pub type Result<T> = std::result::Result<T, NumError>;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("loss must reduce to a scalar, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),
    #[error("parameter/gradient key mismatch: `{0}`")]
    KeyMismatch(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl NumError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        NumError::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
