use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A carrier frequency falls outside the band a propagation model covers.
    #[error("{model} is valid for {band}; got {value}")]
    Range {
        model: &'static str,
        band: &'static str,
        value: String,
    },

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: corrupt file: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },

    #[error("{}: unsupported format version {found} (expected {expected})", path.display())]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("schema error: {0}")]
    Schema(String),

    /// A loss or activation went non-finite during training or sampling.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("gradient requested for parameter `{0}` which is not part of the recorded graph")]
    Unrecorded(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Corrupt { .. } | Error::Version { .. } => 2,
            Error::Numeric(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
