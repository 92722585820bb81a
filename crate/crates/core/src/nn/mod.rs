//! Dense numerical kernel: tensors, a recording tape for reverse-mode
//! gradients, losses, Adam, and seeded initialization.

pub mod init;
pub mod loss;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use init::{init_params, Init};
pub use loss::{bce, bce_grad, BCE_CLAMP};
pub use optim::{adam_step, l2_grad, l2_penalty, sgd_step, AdamConfig, AdamState};
pub use params::{Gradients, Param, ParamGroup, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{affine, elementwise_mul, relu, sigmoid, DenseMatrix, DenseVector};
