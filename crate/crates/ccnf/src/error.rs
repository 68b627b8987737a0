//! Crate-wide error type.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An input had the wrong length or shape.
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    /// An input contained NaN or infinite entries.
    NonFinite {
        what: &'static str,
    },
    /// An input value was outside its admissible range.
    InvalidInput(String),
    /// An operation was called on an object in the wrong state
    /// (e.g. backward on an unfinalized tape).
    State(&'static str),
    /// The requested operation is not supported by this configuration;
    /// the message names the supported alternative.
    Capability(String),
    /// The adaptive solver exceeded its step budget.
    Divergence {
        t: f64,
        max_steps: usize,
    },
    /// A non-finite state appeared during integration or training.
    Instability {
        context: String,
    },
    /// An attribute dimension is constant and cannot be normalized.
    DegenerateDimension {
        axis: usize,
    },
    /// File or parse failure, with the offending path or line.
    Format(String),
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DimensionMismatch {
                what,
                expected,
                got,
            } => write!(f, "{what}: expected length {expected}, got {got}"),
            Self::NonFinite { what } => write!(f, "{what}: non-finite value"),
            Self::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Self::State(msg) => write!(f, "invalid state: {msg}"),
            Self::Capability(msg) => write!(f, "unsupported: {msg}"),
            Self::Divergence { t, max_steps } => {
                write!(f, "solver exceeded {max_steps} steps at t={t}")
            }
            Self::Instability { context } => write!(f, "numerical instability: {context}"),
            Self::DegenerateDimension { axis } => {
                write!(f, "attribute dimension {axis} is constant (min == max)")
            }
            Self::Format(msg) => write!(f, "format error: {msg}"),
            Self::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}
