//! Dense tensors with a small reverse-mode autodiff tape.
//!
//! Only the operations the UNet needs are provided. Shapes must match exactly
//! except for conv/linear bias and the per-channel bias used for time
//! conditioning.

mod dense;
mod element;
mod gradcheck;
mod graph;

pub use dense::Tensor;
pub use element::Element;
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFiniteValue(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("loss does not depend on any trainable leaf")]
    DetachedGraph,
}
