use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}: required file is missing")]
    MissingFile(PathBuf),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("edge edit #{index} ({edit}) is invalid: {reason}")]
    InvalidEdit {
        index: usize,
        edit: String,
        reason: &'static str,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("unknown configuration key `{0}`")]
    UnknownConfigKey(String),

    #[error("bad value for configuration key `{key}`: {msg}")]
    ConfigValue { key: String, msg: String },

    #[error("unknown scenario `{name}`; valid scenarios: {valid}")]
    UnknownScenario { name: String, valid: String },

    #[error("unknown ablation variant `{0}`; valid variants: full, no_LI, no_LE, no_LI_LE, no_LD")]
    UnknownVariant(String),

    #[error("non-finite {what}")]
    NonFinite { what: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingFile(path);
        }
        Error::Io { path, source }
    }

    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
