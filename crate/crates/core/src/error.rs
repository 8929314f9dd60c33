use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors surfaced by every layer of the pipeline.
///
/// The CLI maps `Contract`, `Config`, `Index` and `Numeric` to exit code 1 and
/// the I/O family (`Io`, `Parse`, `Integrity`) to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("numeric domain error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("index {index} out of range [0, {len}) in {op}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate region (area {area:.4} px^2) skipped")]
    DegenerateRegion { area: f64 },

    #[error("non-finite loss at step {step}; last good checkpoint written to {checkpoint}")]
    NonFiniteLoss { step: usize, checkpoint: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Parse(_) | Error::Integrity(_) => 2,
            _ => 1,
        }
    }
}
