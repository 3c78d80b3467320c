//! Dense `f64` tensors, a reverse-mode tape, finite-difference checking and
//! the Adam optimizer.

mod gradcheck;
pub mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, finite_diff_check, rel_error, Coords, GradCheckReport, REL_ERROR_FLOOR};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Epsilon used by every normalization layer.
pub const NORM_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests;
