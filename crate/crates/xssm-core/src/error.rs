use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor ops, model assembly, and file I/O.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two tensors (or a tensor and an op contract) disagree on shape.
    ShapeMismatch { context: &'static str, expected: Vec<usize>, got: Vec<usize> },
    /// An op argument is out of its documented domain.
    InvalidArgument { context: &'static str, message: String },
    /// A primitive produced (or received) a NaN/Inf value.
    NonFinite { context: &'static str },
    /// Malformed or truncated file contents.
    Format { path: String, message: String },
    /// Underlying I/O failure.
    Io { path: String, message: String },
}

impl Error {
    pub fn invalid(context: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidArgument { context, message: message.into() }
    }

    pub fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }

    pub fn io(path: impl Into<String>, err: std::io::Error) -> Self {
        Error::Io { path: path.into(), message: err.to_string() }
    }

    /// True for NaN/Inf failures; the CLI maps these to a dedicated exit code.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { context, expected, got } => {
                write!(f, "{context}: shape mismatch, expected {expected:?}, got {got:?}")
            }
            Error::InvalidArgument { context, message } => write!(f, "{context}: {message}"),
            Error::NonFinite { context } => write!(f, "{context}: non-finite value encountered"),
            Error::Format { path, message } => write!(f, "{path}: {message}"),
            Error::Io { path, message } => write!(f, "{path}: {message}"),
        }
    }
}

impl std::error::Error for Error {}
