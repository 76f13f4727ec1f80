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

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("line {line}: malformed sample: {msg}")]
    MalformedLine { line: usize, msg: String },

    #[error("line {line}: label must be 0 or 1, found {found:?}")]
    Label { line: usize, found: String },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("embedding file line {line}: {msg}")]
    Embedding { line: usize, msg: String },

    #[error("token id {id} outside vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: u64, loss: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the content of an input file.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::MalformedLine { .. }
                | Error::Label { .. }
                | Error::EmptyCorpus
                | Error::Embedding { .. }
                | Error::IdOutOfRange { .. }
                | Error::Io { .. }
                | Error::Checkpoint(_)
                | Error::Format(_)
        )
    }
}
