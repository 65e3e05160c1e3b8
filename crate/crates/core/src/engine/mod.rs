//! Minimal deterministic network engine.
//!
//! Activations are stored batch-first and channels-last (`[batch, h, w, c]`),
//! all arithmetic is `f64`, and every layer output and gradient is checked
//! for NaN/Inf.

mod gemm;
mod field;
pub(crate) use field::{predict_field, PaddedImage};
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod optim;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_against, GradCheckReport, LayerCheck};
pub use layers::{
    conv_forward, dense_forward, maxpool_forward, relu, sigmoid, softmax_xent_forward, Dims,
    LayerSpec, Pooled, SoftmaxXent,
};
pub use network::{
    backprop, Architecture, Batch, GradientRecord, LayerGradient, LayerParams, ParamStore,
    Sequential, TowerNet, Workspace,
};
pub use optim::sgd_step;
pub use tensor::Tensor;
