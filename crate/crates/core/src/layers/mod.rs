//! Layers with hand-derived backward passes.
//!
//! A layer caches what its backward pass needs during `forward`; calling
//! `backward` without a matching forward is a state error. Parameter
//! gradients accumulate into [`Param::grad`] until `zero_grad`.

mod activation;
mod batchnorm;
mod conv;
mod dropout;
pub mod gradcheck;
mod linear;
mod loss;
mod sequential;

pub use activation::{Relu, Sigmoid};
pub use batchnorm::BatchNorm1d;
pub use conv::{global_avg_pool, Conv2d, GlobalAvgPool, MaxPool2d};
pub use dropout::Dropout;
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use linear::Linear;
pub use loss::{cross_entropy_terms, SoftmaxCrossEntropy};
pub use sequential::Sequential;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Stochastic layers sample, normalisation uses batch statistics.
    Train,
    /// Training-mode behaviour with dropout acting as the identity. Used for
    /// gradient checks of the full model.
    TrainNoDropout,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        !matches!(self, Mode::Eval)
    }

    pub fn dropout_active(self) -> bool {
        matches!(self, Mode::Train)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        self.grad.add_assign(g)
    }
}

pub trait Layer: Send {
    fn kind(&self) -> &'static str;

    /// Hyperparameters recorded in checkpoint manifests.
    fn hyper(&self) -> serde_json::Value {
        serde_json::json!({})
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor>;

    /// Returns dL/dx and accumulates parameter gradients.
    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor>;

    fn params(&self) -> Vec<(String, &Param)> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        Vec::new()
    }

    /// Non-trainable state saved with checkpoints (running statistics).
    fn buffers(&self) -> Vec<(String, &Tensor)> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        Vec::new()
    }

    /// Reuse the last sampled randomness (dropout masks) on later forwards.
    fn freeze_randomness(&mut self, _frozen: bool) {}

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.len()).sum()
    }
}

pub(crate) fn missing_forward(kind: &str) -> Error {
    Error::State(format!("{kind}: backward called before forward"))
}

/// Kaiming-uniform bound for a fan-in, with the ReLU gain √2.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}
