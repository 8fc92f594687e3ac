//! Dense tensors, reverse-mode differentiation, optimizers and gradient
//! checking. Training runs in `f32`; gradient checks run in `f64`.

mod gradcheck;
mod optim;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{relative_error, GradCheck, GradCheckReport};
pub use optim::{Optimizer, OptimizerKind};
pub use param::{combined_hash, Module, ParamKey, Parameter};
pub use tape::{layer_norm, Gradients, OpKind, Tape, Var};

pub use tensor::{assemble_windows, gelu_grad_scalar, gelu_scalar, Scalar, Tensor};
pub(crate) use tensor::check_window;
