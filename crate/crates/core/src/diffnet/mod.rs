//! Minimal differentiable computation: dense matrices, MLPs with analytic
//! backward passes, softmax, Adam, a cosine schedule, a finite-difference
//! gradient checker and the named-tensor checkpoint container.

pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use layers::{Activation, LinearGrad, LinearLayer, Mlp, MlpCache, MlpGrads};
pub use ops::{l2_normalize_rows, l2_normalize_rows_backward, log_softmax_rows, softmax_rows};
pub use optim::{cosine_lr, AdamConfig, AdamState};
pub use tensor::{dot, Scalar, Tensor2};
