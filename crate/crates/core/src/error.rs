use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Everything that can go wrong while reading, storing or mining a log.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    /// Malformed input text. `position` is a byte offset for JSON and a
    /// line number for XML; the message says which.
    #[error("{format} parse error at {position}: {message}")]
    Parse {
        format: &'static str,
        position: String,
        message: String,
    },

    /// Well-formed input that does not follow the OCEL layout.
    #[error("schema error in {record}: {message}")]
    Schema { record: String, message: String },

    #[error("duplicate {kind} id {id:?}")]
    DuplicateId { kind: &'static str, id: String },

    #[error("corrupted data in {}: offset {offset}: {message}", file.display())]
    Corruption {
        file: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("unsupported format version {found} in {} (expected {expected})", file.display())]
    UnsupportedVersion {
        file: PathBuf,
        found: u8,
        expected: u8,
    },

    #[error("store at {} is locked by another writer", .0.display())]
    Locked(PathBuf),

    #[error("store at {} already holds a log", .0.display())]
    AlreadyPopulated(PathBuf),

    #[error("no store at {}", .0.display())]
    NoStore(PathBuf),

    #[error("unknown object type {0:?}")]
    UnknownObjectType(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// The consumer of a record stream went away.
    #[error("record stream closed by consumer")]
    Cancelled,
}

impl Error {
    pub(crate) fn schema(record: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            record: record.into(),
            message: message.into(),
        }
    }

    pub(crate) fn corruption(file: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Corruption {
            file: file.into(),
            offset,
            message: message.into(),
        }
    }

    /// True for errors caused by the content of the input data rather than
    /// the environment. The CLI maps these to a distinct exit code.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Schema { .. }
                | Error::DuplicateId { .. }
                | Error::Corruption { .. }
                | Error::UnsupportedVersion { .. }
                | Error::UnknownObjectType(_)
        )
    }
}
