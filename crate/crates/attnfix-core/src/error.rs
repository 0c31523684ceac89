use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors surfaced by the compute kernel and the modules built on it.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A tensor contained NaN or Inf where finite values are required.
    NonFinite { op: &'static str },
    /// An index (token column, class id, ...) was out of range.
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    /// A precondition of the operation's contract was violated.
    Contract(String),
    /// Backward was requested on an already-consumed tape.
    TapeConsumed,
    /// Backward was requested on a non-scalar output.
    NotScalar { shape: Vec<usize> },
    /// An optimizer step found a parameter without a populated gradient.
    MissingGrad { param: usize },
    /// The patch operator cannot keep a row stochastic (reference mass >= 1).
    PatchInfeasible { row: usize, mass: f64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            Error::NonFinite { op } => write!(f, "{op}: non-finite value encountered"),
            Error::IndexOutOfRange { what, index, len } => {
                write!(f, "{what}: index {index} out of range (len {len})")
            }
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::TapeConsumed => write!(f, "tape already consumed by a backward pass"),
            Error::NotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::MissingGrad { param } => {
                write!(f, "parameter {param} has no gradient; run backward first")
            }
            Error::PatchInfeasible { row, mass } => {
                write!(f, "patch infeasible at row {row}: reference mass {mass} >= 1")
            }
        }
    }
}

#[cfg(any(test, feature = "std"))]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
