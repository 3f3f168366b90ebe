use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid angle: theta={theta}, phi={phi}")]
    InvalidAngle { theta: f64, phi: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate protocol: directions {0} and {1} coincide up to sign")]
    DegenerateProtocol(usize, usize),

    #[error("ragged bvec: {0}")]
    RaggedBvec(String),

    #[error("non-unit direction in column {column}: norm {norm}")]
    NonUnitDirection { column: usize, norm: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("protocol mismatch: {0}")]
    ProtocolMismatch(String),

    #[error("singular normal equations: {0}")]
    Singular(String),

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("malformed {kind} file: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(kind: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            kind,
            detail: detail.into(),
        }
    }
}
