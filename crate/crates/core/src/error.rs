use std::path::PathBuf;

use thiserror::Error;

use crate::engine::EngineError;
use crate::layout::LayoutError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("not a permutation of 1..{0}")]
    NotPermutation(usize),
    #[error("example {qid}: {message}")]
    Example { qid: String, message: String },
    #[error("layout {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("non-finite loss at step {step} (list {list}, point {point}, calibration {calibration})")]
    NonFiniteLoss {
        step: usize,
        list: f64,
        point: f64,
        calibration: f64,
    },
    #[error("malformed run: {0}")]
    MalformedRun(String),
    #[error("orders differ: {0}")]
    OrderMismatch(String),
    #[error("empty candidate list")]
    NoCandidates,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
