use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("cannot mean-pool over an empty position set")]
    EmptyPool,
    #[error("usage error: {0}")]
    Usage(String),
    #[error("graph has no triples")]
    GraphHasNoTriples,
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("corpus parse error at line {line}: {message}")]
    CorpusParse { line: usize, message: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("length error: {0}")]
    Length(String),
    #[error("marginal error: {0}")]
    Marginal(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for violations of internal invariants, as opposed to bad user
    /// input, configuration or I/O.
    pub fn is_internal(&self) -> bool {
        matches!(
            self,
            Error::Shape(_) | Error::Index(_) | Error::EmptyPool | Error::Usage(_) | Error::Numeric(_)
        )
    }
}
