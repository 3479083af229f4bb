//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Supported ops cover what small MLPs, energies and counterfactual losses
//! need: `matmul`, elementwise arithmetic with scalar and row-vector
//! broadcasting, `relu`, `sigmoid`, `softmax`, `logsumexp`, reductions and
//! column slicing.

mod check;
mod tape;
mod tensor;

pub use check::{central_difference, relative_error};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;
