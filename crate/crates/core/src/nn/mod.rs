//! Minimal deterministic tensor and layer engine with explicit backward passes.

mod gradcheck;
mod layer;
mod loss;
mod param;
mod sgd;
mod stack;
mod tensor;

pub use gradcheck::{check_gradients, grad_check, scaled_error, Evaluation};
pub use layer::{layer_backward, layer_backward_raw, layer_forward, LayerSpec};
pub use loss::euclidean_loss;
pub use param::{Grads, ParamId, ParamStore, Parameter};
pub use sgd::{sgd_update, SgdHyper};
pub use stack::{BoundLayer, Stack, StackTrace};
pub use tensor::Tensor;

pub(crate) use layer::dot;
