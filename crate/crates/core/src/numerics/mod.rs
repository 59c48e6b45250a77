//! Tensor arithmetic, reverse-mode gradients and finite-difference checks.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckReport, MIN_COORDS};
pub use graph::{BiasTarget, Bindings, Gradients, Graph, Var};
pub use tensor::{matmul_t, Tensor, LAYER_NORM_EPS};
