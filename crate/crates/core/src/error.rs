use cq_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CqError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid {name}: {detail}")]
    Config { name: String, detail: String },

    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },

    #[error("{what}: degenerate input: {detail}")]
    Degenerate { what: &'static str, detail: String },

    #[error("frame {frame}: {source}")]
    Frame { frame: usize, source: Box<CqError> },

    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },

    #[error("training diverged at epoch {epoch}: {loss} is not finite")]
    Diverged { epoch: usize, loss: &'static str },

    #[error("{path}: {detail}")]
    Data { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CqError {
    pub fn config(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Self::Config { name: name.into(), detail: detail.into() }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Invalid { op, detail: detail.into() }
    }

    pub fn degenerate(what: &'static str, detail: impl Into<String>) -> Self {
        Self::Degenerate { what, detail: detail.into() }
    }

    pub fn data(path: impl AsRef<std::path::Path>, detail: impl ToString) -> Self {
        Self::Data { path: path.as_ref().display().to_string(), detail: detail.to_string() }
    }

    pub fn in_frame(self, frame: usize) -> Self {
        Self::Frame { frame, source: Box::new(self) }
    }

    /// Stable machine-readable code for command-line reporting.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Tensor(TensorError::Format { .. }) => "E_FORMAT",
            Self::Tensor(TensorError::Shape { .. } | TensorError::ZeroExtent { .. }) => "E_SHAPE",
            Self::Tensor(TensorError::Io(_)) | Self::Io(_) => "E_IO",
            Self::Tensor(_) | Self::Invalid { .. } => "E_INVALID",
            Self::Config { .. } => "E_CONFIG",
            Self::Degenerate { .. } => "E_DEGENERATE",
            Self::Frame { source, .. } => source.code(),
            Self::NonFiniteGradient { .. } | Self::Diverged { .. } => "E_DIVERGED",
            Self::Data { .. } => "E_DATA",
        }
    }
}

pub type Result<T, E = CqError> = std::result::Result<T, E>;
