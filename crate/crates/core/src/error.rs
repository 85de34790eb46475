use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller passed a value outside an operation's domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation was invoked in the wrong lifecycle state (e.g. backward before forward).
    #[error("invalid state: {0}")]
    State(String),

    #[error("protocol error in round {round}: {detail} (party {party})")]
    Protocol {
        round: u64,
        party: usize,
        detail: String,
    },

    #[error("insufficient retained samples: {0}")]
    InsufficientRetained(String),

    #[error("parse error in {path}: line {line}, column {column}: {detail}")]
    Parse {
        path: PathBuf,
        line: u64,
        column: String,
        detail: String,
    },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("checksum mismatch in {0}")]
    Checksum(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
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
}
