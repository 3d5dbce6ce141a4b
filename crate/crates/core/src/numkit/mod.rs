//! Dense-tensor numerics: row-major f64 tensors, a reverse-mode tape,
//! named parameter storage with Adam, and a finite-difference gradient
//! checker used throughout the test suites.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_ladder, grad_check_sampled};
pub use params::{AdamConfig, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul, softmax_rows, NumError, Tensor};

/// Leaky ReLU slope used everywhere an activation is applied.
///
/// The architecture names the activation but not the slope; 0.01 is the
/// conventional choice and is fixed so checkpoints stay comparable.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
