//! Small reverse-mode automatic differentiation engine.
//!
//! Tensors are dense row-major `f64`. Operations are evaluated eagerly and
//! recorded on a [`Graph`]; [`Graph::grad`] records the backward pass on the
//! same graph, so gradients of gradient norms (as used by Lipschitz
//! penalties) are available without a separate mechanism.

mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{CustomOp, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::ParamSet;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("expected a single-element tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, Error>;
