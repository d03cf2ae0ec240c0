//! Dense tensors, reverse-mode autodiff and the Adam optimizer.

mod adam;
mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, adam_update, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_coords};
pub use params::{normal_init, xavier_uniform, ParamEntry, ParamId, ParamStore};
pub use tape::{sigmoid_scalar, Gradients, Tape, Var, BCE_CLAMP};
pub use tensor::Tensor;
