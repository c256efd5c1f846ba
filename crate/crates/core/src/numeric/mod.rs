//! Dense tensors, a reverse-mode tape, and a finite-difference checker.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{analytic_gradients, compare_gradients, grad_check, relative_error, GradCheckReport, Offender};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{
    cosine_matrix, cosine_sim, dot, huber, huber_grad, l2_norm, normalize_rows, orthonormalize_rows, Tensor,
};
