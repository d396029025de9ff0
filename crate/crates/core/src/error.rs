use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NmtError>;

#[derive(Debug, Error)]
pub enum NmtError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("softmax mask selects no entries (row {row})")]
    EmptyMask { row: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("malformed model container: {0}")]
    Container(String),
}

impl NmtError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        NmtError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NmtError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by non-finite numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, NmtError::NonFinite(_))
    }
}
