//! Visual-dialog answer ranking with a from-scratch multimodal transformer.
//!
//! Region features and dialog text are packed into one sequence and encoded
//! by a bidirectional self-attention stack. Training combines masked-token
//! recovery with a 4-way classifier over matched and polluted
//! (image, history, question, answer) quartettes; answers are ranked by the
//! classifier's matched probability.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for callers that do not care.

pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod encoding;
mod error;
pub mod evaluation;
pub mod objectives;
pub mod sampling;
mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use autodiff::{Tape, Tensor, Var};
pub use backbone::{ModelConfig, TransformerParams};
pub use data::{Checkpoint, FeatureStore};
pub use encoding::{BasicTokenizer, Vocabulary};
pub use evaluation::MetricReport;
pub use train::{RunConfig, TrainLog, Trainer};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Params64 = TransformerParams<f64>;
pub type Params32 = TransformerParams<f32>;
pub type Checkpoint64 = Checkpoint<f64>;
pub type Trainer64 = Trainer<f64>;
pub type Trainer32 = Trainer<f32>;
