//! Dense matrices, differentiable primitives, gradient checking and SGD.

mod gradcheck;
mod matrix;
pub mod ops;
mod params;
mod sgd;
mod tape;

pub use gradcheck::{fd_check, fd_check_scaled};
pub use matrix::Matrix;
pub use ops::{bce, cross_entropy, mse, relu, sigmoid, softmax_rows};
pub use params::{Parameter, ParameterStore};
pub use sgd::{sgd_step, sgd_step_prefix};
pub use tape::{Tape, Var};
