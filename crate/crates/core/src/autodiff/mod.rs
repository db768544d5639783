//! Dense tensors, a reverse-mode tape, parameters, and the Adam optimizer.

mod optim;
mod param;
mod tape;
mod tensor;

pub use optim::{adam_step, lr_at, AdamConfig};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
