use difflab_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("numerical abort at step {step}: {detail}")]
    Numerical { step: u64, detail: String },
    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl LabError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Self::Contract(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Process exit code: 2 for numerical aborts, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Numerical { .. } => 2,
            Self::Tensor(TensorError::NonFiniteGradient { .. }) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
