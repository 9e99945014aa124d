use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::gateway::GatewayError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("duplicate item_id {id:?} on line {line}")]
    DuplicateItem { id: String, line: usize },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("gateway call failed for {context}: {source}")]
    Gateway {
        context: String,
        #[source]
        source: GatewayError,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("code {code} out of range at level {level} (K = {k})")]
    CodeOutOfRange { level: usize, code: usize, k: usize },

    #[error("item id mismatch: expected {expected:?}, got {got:?}")]
    ItemMismatch { expected: String, got: String },

    #[error("unknown item {0:?}")]
    UnknownItem(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("unsupported format version {found:?} (expected {expected:?})")]
    Version { expected: String, found: String },

    #[error("corrupt file {}: {msg}", path.display())]
    Corrupt { path: PathBuf, msg: String },

    #[error("non-finite value during {0}")]
    NonFinite(String),

    #[error("vocabulary hash mismatch: checkpoint {checkpoint}, current {current}")]
    VocabMismatch { checkpoint: String, current: String },

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("missing prerequisite {}: run `{stage}` first", path.display())]
    MissingPrerequisite { stage: String, path: PathBuf },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn gateway(context: impl Into<String>, source: GatewayError) -> Self {
        Error::Gateway {
            context: context.into(),
            source,
        }
    }
}
