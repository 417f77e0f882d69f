use alloc::string::String;
use core::fmt;

/// Failure taxonomy for the core. Numeric failures always name the offending
/// op so a training abort is attributable from the message alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Shape or dtype contract broken at an op boundary.
    Shape { op: &'static str, detail: String },
    /// A precondition outside shapes (range, ordering, missing state).
    Contract { op: &'static str, detail: String },
    /// NaN or infinity produced; the step must be abandoned.
    NonFinite { op: &'static str },
    /// Input is degenerate for the requested statistic (e.g. zero variance).
    Degenerate { op: &'static str, detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in `{op}`: {detail}"),
            Error::Contract { op, detail } => write!(f, "contract violation in `{op}`: {detail}"),
            Error::NonFinite { op } => write!(f, "non-finite value produced by `{op}`"),
            Error::Degenerate { op, detail } => write!(f, "degenerate input to `{op}`: {detail}"),
        }
    }
}

#[cfg(any(test, feature = "std"))]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl fmt::Display) -> Result<T> {
    Err(Error::Shape { op, detail: alloc::format!("{detail}") })
}

pub(crate) fn contract_err<T>(op: &'static str, detail: impl fmt::Display) -> Result<T> {
    Err(Error::Contract { op, detail: alloc::format!("{detail}") })
}

pub(crate) fn degenerate_err<T>(op: &'static str, detail: impl fmt::Display) -> Result<T> {
    Err(Error::Degenerate { op, detail: alloc::format!("{detail}") })
}
