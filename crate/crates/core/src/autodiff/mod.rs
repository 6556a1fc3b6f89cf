//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, grad_check_entries};
pub use graph::{log_sum_exp, Elementwise, Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
