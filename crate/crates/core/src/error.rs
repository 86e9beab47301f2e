use thiserror::Error;

/// Error type shared by all engine modules.
#[derive(Debug, Error)]
pub enum FgpError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("unknown layer id {layer}")]
    UnknownLayer { layer: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("data format error in {path}: {reason}")]
    DataFormat { path: String, reason: String },

    #[error("classes without samples: {missing:?}")]
    MissingClasses { missing: Vec<usize> },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Diverged { epoch: usize, batch: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, FgpError>;

impl FgpError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        FgpError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(path: impl Into<String>, reason: impl Into<String>) -> Self {
        FgpError::DataFormat {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
