use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure classes, used by the CLI to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Integrity,
    Runtime,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("configuration error at `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("layer index {index} out of range for depth {depth}")]
    Layer { index: usize, depth: usize },

    #[error("timestep {t} out of range for schedule of length {steps}")]
    Step { t: usize, steps: usize },

    #[error("schedule error at cell (t={t}, l={l}): {msg}")]
    ScheduleCell { t: usize, l: usize, msg: String },

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("cache state error at layer {l}, step {t}: {msg}")]
    CacheState { t: usize, l: usize, msg: String },

    #[error("plan error: {0}")]
    Plan(String),

    #[error("integrity error in {}: {msg}", path.display())]
    Integrity { path: PathBuf, msg: String },

    #[error("fingerprint mismatch: store has {found}, model has {expected}")]
    Fingerprint { expected: String, found: String },

    #[error("comparison error: {0}")]
    Comparison(String),

    #[error("degeneracy anchor drifted: {0}")]
    Anchor(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn integrity(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Integrity {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config { .. }
            | Error::Json(_)
            | Error::Schedule(_)
            | Error::ScheduleCell { .. } => ErrorKind::Config,
            Error::Integrity { .. } | Error::Fingerprint { .. } => ErrorKind::Integrity,
            _ => ErrorKind::Runtime,
        }
    }
}
