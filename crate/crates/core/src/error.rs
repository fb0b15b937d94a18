use std::path::PathBuf;

/// Errors produced anywhere in the training and decoding stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A NaN or infinity showed up where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// The encoder output is too short to align with the CTC target.
    #[error("no feasible alignment: {frames} frames for a target needing {needed}")]
    NoFeasibleAlignment { frames: usize, needed: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file was readable but its content is malformed.
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
