use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library. Each variant maps onto one CLI error
/// category (see [`Error::category`]).
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, specs or settings that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API called in a state where it is not allowed.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed or out-of-range input data.
    #[error("data error: {message}")]
    Data {
        message: String,
        /// Byte offset into the offending file, when known.
        offset: Option<u64>,
    },

    #[error("missing data: {}", .0.display())]
    MissingData(PathBuf),

    #[error("checkpoint corrupted: {0}")]
    Corruption(String),

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    /// Training produced a non-finite loss.
    #[error("numeric divergence at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    /// A frozen parameter changed, or another internal contract broke.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>, offset: Option<u64>) -> Self {
        Error::Data {
            message: msg.into(),
            offset,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category used in CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::Data { .. } => "data",
            Error::MissingData(_) => "missing-data",
            Error::Corruption(_) => "corruption",
            Error::UnsupportedVersion { .. } => "unsupported-version",
            Error::Divergence { .. } => "divergence",
            Error::Invariant(_) => "invariant",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
