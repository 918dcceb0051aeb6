//! Dense `f64` tensors and reverse-mode differentiation.

pub mod format;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use graph::{Graph, Var, LN_EPS};
#[cfg(test)]
pub(crate) use graph::gelu_scalar;
pub use params::{visit_child, visit_child_mut, Parameters};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
