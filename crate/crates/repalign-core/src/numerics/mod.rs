//! Tensors, tape autodiff, optimizers, and the RNG discipline that makes
//! every run bit-reproducible.

pub mod gemm;
pub mod gradcheck;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use optim::{
    adamw_step, clip_global_norm, global_grad_norm, AdamWConfig, EmaState, OptimState, Param,
    ParamId, ParamSet,
};
pub use rng::{Rng, Stream};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
