use alloc::string::String;
use alloc::vec::Vec;

/// Everything that can go wrong inside the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },

    #[error("tensor shape {shape:?} holds {expected} elements but {actual} values were supplied")]
    DataLength { shape: Vec<usize>, expected: usize, actual: usize },

    #[error("tensor shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),

    #[error("unknown op kind `{0}`")]
    UnknownOp(String),

    #[error("{op}: unsupported attribute: {detail}")]
    Attribute { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, node {node} has shape {shape:?}")]
    NonScalarLoss { node: usize, shape: Vec<usize> },

    #[error("node {0} does not exist in this graph")]
    UnknownNode(usize),

    #[error("node {0} is not a leaf")]
    NotALeaf(usize),

    #[error("gradient check refused: node {0} has an unfrozen stochastic scale (forward != backward)")]
    Unfrozen(usize),

    #[error("{0}")]
    Invalid(String),

    #[error("{0} is not allowed in eval mode")]
    EvalMode(&'static str),

    #[error("non-finite loss {value} at iteration {iteration}")]
    NonFinite { iteration: u64, value: f64 },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::Invalid(alloc::format!($($arg)*))
    };
}
pub(crate) use invalid;
