use std::path::PathBuf;

/// Errors raised anywhere in the library.
///
/// Each variant maps onto one CLI exit code (see [`HcwError::exit_code`]).
#[derive(Debug, thiserror::Error)]
pub enum HcwError {
    /// Bad input: shapes, tree structure, configuration values, unknown names.
    #[error("validation error: {0}")]
    Validation(String),
    /// A numerical routine could not produce a usable result.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// An API was used out of order, e.g. a tape replayed twice.
    #[error("usage error: {0}")]
    Usage(String),
    /// A file did not follow the expected on-disk layout.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, HcwError>;

impl HcwError {
    pub fn validation(msg: impl Into<String>) -> Self {
        HcwError::Validation(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        HcwError::Numeric(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        HcwError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HcwError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 validation/usage, 3 numeric, 4 I/O or format.
    pub fn exit_code(&self) -> i32 {
        match self {
            HcwError::Validation(_) | HcwError::Usage(_) => 2,
            HcwError::Numeric(_) => 3,
            HcwError::Format { .. } | HcwError::Io { .. } => 4,
        }
    }
}
