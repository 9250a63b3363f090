//! Tape-based reverse-mode differentiation over [`Tensor`](crate::Tensor)s.

mod gradcheck;
mod graph;
mod ops;

pub use gradcheck::{grad_check, GradCheckReport, LeafCheck};
pub use graph::{Gradients, Graph, NodeId};
pub use ops::{BnMode, Op, OpKind};
