//! Dense `f32` tensors, the layer kinds the synthesizer uses, and a
//! finite-difference gradient oracle.

mod gradcheck;
mod layers;
pub mod ops;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_grad, max_relative_error, DEFAULT_EPS};
pub use layers::{conv1d_forward, linear_forward, Conv1d, Dense, LayerKind, Linear};
pub use ops::{matmul, mse_loss};
pub(crate) use rng::mix64;
pub use rng::RngState;
pub use tensor::{Param, Tensor};
