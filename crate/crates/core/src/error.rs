use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: u64, reason: String },

    #[error("unsupported format: {0}")]
    Version(String),

    #[error("stage {stage}: {reason}")]
    Stage { stage: usize, reason: String },

    #[error("non-finite loss at stage {stage}, iteration {iteration}: {dump}")]
    NonFinite {
        stage: usize,
        iteration: usize,
        dump: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot access {path}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
