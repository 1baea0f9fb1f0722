use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate variance in batch_norm2d: {0} element(s) per channel in training mode")]
    DegenerateVariance(usize),

    #[error("tokenization error: patch size {patch} does not divide {height}x{width}")]
    Tokenization {
        patch: usize,
        height: usize,
        width: usize,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("non-finite loss at step {step}; last good checkpoint: {}", last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "<none>".into()))]
    NonFinite {
        step: usize,
        last_good: Option<PathBuf>,
    },

    #[error("unknown {kind} '{name}' (registered: {available})")]
    UnknownEntry {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    RawIo(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
