//! Dense tensors, a reverse-mode tape, Adam, and a finite-difference checker.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tape::{softmax_in_place, Gradients, Tape, Targets, Var};
pub use tensor::Tensor;
