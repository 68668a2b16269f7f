//! Reverse-mode automatic differentiation over dense `f64` tensors.

pub mod checkpoint;
mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheck};
pub use tape::{sigmoid, softplus, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
