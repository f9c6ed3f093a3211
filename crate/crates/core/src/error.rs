use std::path::PathBuf;

use thiserror::Error;

/// Error type shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A request the implementation does not support (l > l_max, spin view on a spinless container...).
    #[error("capability error: {0}")]
    Capability(String),
    /// Inconsistent or unreachable configuration.
    #[error("configuration error: {0}")]
    Configuration(String),
    /// Mismatched shapes, edge sets or paths.
    #[error("structural error: {0}")]
    Structural(String),
    /// Data that parses but violates a physical or numerical invariant.
    #[error("validation error: {0}")]
    Validation(String),
    /// Schema violations in input files. `pointer` is a JSON pointer into the document.
    #[error("parse error at {pointer}: {message}")]
    Parse { pointer: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Numerical breakdown: non-finite losses, failed factorizations.
    #[error("numerical error: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable label of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Capability(_) => "capability",
            Error::Configuration(_) => "configuration",
            Error::Structural(_) => "structural",
            Error::Validation(_) => "validation",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::Numerical(_) => "numerical",
        }
    }

    pub fn parse(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            pointer: pointer.into(),
            message: message.into(),
        }
    }
}
