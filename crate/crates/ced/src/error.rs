use std::path::PathBuf;

use ced_core::cluster::ClusterError;
use ced_core::eval::EvalError;
use ced_core::gradcheck::GradError;
use ced_core::{CedError, CorpusError, LmError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: field `{field}` {reason}")]
    Schema {
        path: PathBuf,
        line: usize,
        field: String,
        reason: String,
    },
    #[error("{path}:{line}: duplicate example id {id:?}")]
    DuplicateId { path: PathBuf, line: usize, id: String },
    #[error("{artifact}: produced by config {found}, current config is {expected}")]
    Lineage {
        artifact: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },
    #[error("scorer bridge: {0}")]
    Bridge(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Ced(#[from] CedError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Broad failure class, mapped onto the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Compute,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Compute => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Compute => "compute",
        }
    }
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Lm(LmError::InvalidConfig(_)) => ErrorKind::Config,
            Error::Corpus(CorpusError::InvalidPromptSpec(_)) => ErrorKind::Config,
            Error::Cluster(ClusterError::InvalidK { .. }) => ErrorKind::Config,
            Error::Eval(EvalError::Lm(_)) => ErrorKind::Compute,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Schema { .. }
            | Error::DuplicateId { .. }
            | Error::Lineage { .. }
            | Error::Artifact { .. }
            | Error::Corpus(_)
            | Error::Eval(_)
            | Error::Lm(LmError::Corrupt(_)) => ErrorKind::Data,
            Error::Bridge(_) | Error::Lm(_) | Error::Ced(_) | Error::Cluster(_) | Error::Grad(_) => {
                ErrorKind::Compute
            }
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind().exit_code()
    }

    /// Machine-readable form written to stderr by the CLI.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "error": {
                "kind": self.kind().as_str(),
                "exit_code": self.exit_code(),
                "message": self.to_string(),
            }
        })
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn artifact(path: impl Into<PathBuf>, message: impl std::fmt::Display) -> Error {
        Error::Artifact {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
