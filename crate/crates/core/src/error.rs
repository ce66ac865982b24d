use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Dimension or layout mismatch (grid sides, vector dims, kernel divisibility).
    Shape(String),
    /// A computation produced NaN or infinity.
    NonFinite(String),
    /// Invalid configuration or argument.
    Config(String),
    /// A reduction plan asks for more tokens than are available.
    Infeasible {
        what: String,
        available: usize,
        requested: usize,
    },
    /// Object placement (or similar bounded-retry search) exhausted its retries.
    Exhausted(String),
    /// Malformed, truncated, or checksum-failing serialized data.
    Corrupt(String),
    /// Optimization ran away from its starting loss instead of reducing it.
    Diverged(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(s) => write!(f, "shape error: {s}"),
            Error::NonFinite(s) => write!(f, "non-finite value: {s}"),
            Error::Config(s) => write!(f, "invalid config: {s}"),
            Error::Infeasible {
                what,
                available,
                requested,
            } => write!(
                f,
                "infeasible plan: {what} (available {available}, requested {requested})"
            ),
            Error::Exhausted(s) => write!(f, "retries exhausted: {s}"),
            Error::Corrupt(s) => write!(f, "corrupt data: {s}"),
            Error::Diverged(s) => write!(f, "training diverged: {s}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
