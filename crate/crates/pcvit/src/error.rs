use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants map onto the CLI exit-code contract: everything except
/// [`Error::Io`] is a user/config/data problem (exit 2); `Io` is an
/// environment problem (exit 3).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {lhs:?} vs {rhs:?}")]
    Dimension {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid axis {axis} for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("unsupported image format: {0}")]
    Format(String),

    #[error("failed to decode image: {0}")]
    Decode(String),

    #[error("checkpoint container: {0}")]
    Container(String),

    #[error("checkpoint tensor {name}: expected shape {expected:?}, found {found:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("class {0} has no positive or no negative samples")]
    DegenerateClass(usize),

    #[error("{path}: {source}")]
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

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
