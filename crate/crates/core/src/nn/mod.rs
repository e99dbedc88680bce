//! Dense tensors, reverse-mode autodiff and the transformer built on them.

mod config;
mod gradcheck;
mod model;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use config::ModelConfig;
pub use gradcheck::{grad_check, GradCheckReport, GradPrecision, ModelObjective, Objective};
pub use model::{backward, forward_loss, loss_and_grads, mean_loss};
pub use params::{init_layer, init_model, Block, Gradients, NamedTensor, ParamBlocks, INIT_STD, LAYER_TENSORS};
pub(crate) use params::layer_rng;
pub use scalar::Scalar;
pub use tape::{NodeId, Tape, LN_EPS};
pub use tensor::Tensor;
