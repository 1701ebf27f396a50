//! Minimal differentiable numeric substrate.
//!
//! There is no general autodiff graph: each layer in the model owns an
//! explicit backward pass built from the primitives here.

pub mod kernels;
pub mod ops;
pub mod optim;
pub mod params;
pub mod payload;
pub mod tensor;

pub use ops::{
    affine, affine_backward, bce_loss, layer_norm, softmax_rows, softmax_rows_backward, AffineGrads, LayerNormCache,
};
pub use optim::{adam_step, lr_at_step, AdamState, LrSchedule};
pub use params::{Grads, Param, ParamId, ParamStore};
pub use tensor::Tensor;
