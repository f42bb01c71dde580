//! Dense matrices, their kernels, and a reverse-mode tape.

mod backend;
pub mod gradcheck;
mod matrix;
pub mod ops;
pub mod rng;
mod tape;

pub use backend::{Backend, Eval, Module, Param};
pub use gradcheck::{finite_diff_entries, finite_diff_grad, max_relative_error, relative_error};
pub use matrix::Matrix;
pub use tape::{Fault, Gradients, Tape, Var};

pub use ops::{gelu, layer_norm, matmul, softmax_rows};

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-6;
