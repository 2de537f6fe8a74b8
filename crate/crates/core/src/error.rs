use std::path::PathBuf;

use thiserror::Error;

use crate::ids::{LocationId, WordId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("descriptor has {found} values, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("descriptor is invalid: {0}")]
    InvalidDescriptor(String),

    #[error("unknown word {0}")]
    UnknownWord(WordId),

    #[error("unknown location {0}")]
    UnknownLocation(LocationId),

    /// A bookkeeping invariant was broken; the iteration must be aborted.
    #[error("internal consistency fault: {0}")]
    Consistency(String),

    #[error("persistence fault: {0}")]
    Persistence(String),

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_persistence(&self) -> bool {
        matches!(self, Error::Persistence(_))
    }
}

impl From<rusqlite::Error> for Error {
    fn from(e: rusqlite::Error) -> Self {
        Error::Persistence(e.to_string())
    }
}
