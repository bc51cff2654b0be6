use alloc::string::String;
use core::fmt;

/// Errors raised by the core numerics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor extents do not line up; names the operation and the axis.
    Shape {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },
    /// Batch-mode batch norm over a per-channel population of < 2 elements.
    DegenerateBatch { population: usize },
    /// An argument is outside its documented range.
    Param(String),
    /// The data itself is invalid (bad label, empty class, duplicate path).
    Data(String),
    /// A model or run configuration is inconsistent.
    Config(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape {
                op,
                axis,
                expected,
                got,
            } => write!(
                f,
                "{op}: {axis} mismatch (expected {expected}, got {got})"
            ),
            Error::DegenerateBatch { population } => write!(
                f,
                "batch norm needs >= 2 elements per channel in train mode, got {population}"
            ),
            Error::Param(msg) => write!(f, "invalid parameter: {msg}"),
            Error::Data(msg) => write!(f, "invalid data: {msg}"),
            Error::Config(msg) => write!(f, "invalid config: {msg}"),
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
