//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records one forward pass; [`Graph::backward`] walks it in
//! reverse and returns [`Gradients`] for every differentiable leaf.

mod array;
mod gradcheck;
mod graph;
mod kernels;

pub use array::Tensor;
pub use gradcheck::{grad_check, grad_check_inputs, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var, BCE_CLAMP};

/// Zero-padding policy for stride-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PaddingMode {
    /// Pads by `(k - 1) / 2` so the output keeps the input extent.
    Same,
    /// No padding; each extent shrinks by `k - 1`.
    Valid,
}

#[cfg(test)]
mod tests;
