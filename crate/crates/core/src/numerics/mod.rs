//! Dense `f64` tensors and a tape-based reverse-mode differentiator covering
//! the operations the encoder and losses need.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{analytic_gradient, compare_gradients, gradient_check, GradientComparison, DEFAULT_STEP};
pub use tape::{Tape, Var, NORMALIZE_EPS};
pub use tensor::Tensor;
