//! Minimal differentiable-operations substrate: f64 tensors, primitives with
//! explicit backward passes, a GRU, losses, SGD and gradient checking.

pub mod checkpoint;
mod gemm;
pub mod gradcheck;
pub mod gru;
pub mod layers;
pub mod loss;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{gradient_check, gradient_check_at};
pub use loss::{aux_seg_loss, dice_loss, weighted_ce_loss};
pub use optim::{sgd_step, Adam, Sgd};
pub use params::{ParamId, ParamSet};
pub use tensor::Tensor;
