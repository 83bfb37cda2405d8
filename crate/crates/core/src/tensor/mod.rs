//! Dense tensors and a define-by-run reverse-mode differentiation engine.
//!
//! Values are row-major [`Tensor`]s. Differentiable computations record onto a
//! [`Graph`]; each op returns a [`Var`] handle, and [`Graph::backward`] sweeps
//! the record once in reverse to produce [`Gradients`].

mod conv;
pub mod gradcheck;
mod graph;
mod ops;
mod scalar;
mod value;

pub use conv::{conv2d_out_extent, conv_transpose2d_out_extent};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId, Var};
pub use ops::concat;
pub use scalar::Scalar;
pub use value::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected a one-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: invalid shape: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("{op}: invalid attribute: {detail}")]
    InvalidAttr { op: &'static str, detail: String },
    #[error("{op}: output extent would be non-positive: {detail}")]
    NonPositiveExtent { op: &'static str, detail: String },
    #[error("{op} produced a non-finite value from finite inputs")]
    NonFinite { op: &'static str },
    #[error("variable belongs to a different graph")]
    ForeignVar,
    #[error("loss does not depend on any parameter")]
    DetachedLoss,
    #[error("finite-difference probe at element {index} was not finite")]
    NonFiniteProbe { index: usize },
}
