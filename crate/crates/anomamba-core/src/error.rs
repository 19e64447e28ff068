//! Error type shared by the compute modules.

use alloc::string::String;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An operation received tensors with incompatible shapes. `detail`
    /// names the offending axes and their extents.
    Shape { op: &'static str, detail: String },
    /// Axis index outside the operand's rank.
    Axis { op: &'static str, axis: usize, rank: usize },
    /// `backward` was called on a non-scalar node.
    NonScalarLoss { numel: usize },
    /// A hyperparameter or weight value violates its contract.
    Invalid { what: &'static str, detail: String },
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::Axis { op, axis, rank } => {
                write!(f, "{op}: axis {axis} out of range for rank {rank}")
            }
            Error::NonScalarLoss { numel } => {
                write!(f, "backward requires a scalar loss, got {numel} elements")
            }
            Error::Invalid { what, detail } => write!(f, "invalid {what}: {detail}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

pub(crate) fn invalid(what: &'static str, detail: String) -> Error {
    Error::Invalid { what, detail }
}
