//! Dense tensors, reverse-mode differentiation and optimization.

pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod optim;
mod param;
mod real;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::overlap_counts;
pub use kernels::{gelu, layer_norm, softmax};
pub use optim::{adamw_step, clip_global_norm, AdamWConfig, OptimizerState, PlateauScheduler};
pub use param::{Init, ParamId, ParamStore, Parameter};
pub use real::{matmul, Real};
pub use tensor::Tensor;
