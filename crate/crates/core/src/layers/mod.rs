//! Differentiable layers with explicit forward and backward passes.
//!
//! The network topology is fixed, so there is no autodiff graph: each layer
//! exposes `forward` and a matching `backward` that consumes the forward
//! inputs (and any cached state) plus the output gradient. Every backward
//! pass is validated against central finite differences in the test suite
//! and the `gradcheck` CLI command.

use std::collections::BTreeMap;

use crate::tensor::{Scalar, Tensor};

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod pool;
pub mod softmax;

pub use activation::{dropout_backward, dropout_forward, relu, relu_backward, DropoutMask};
pub use batchnorm::{batchnorm_backward, batchnorm_eval_input_grad, batchnorm_forward, BnCache, BnOutput, Mode};
pub use conv::{conv2d, conv2d_backward, conv2d_backward_batch, conv2d_batch, Conv2dSpec};
pub use dense::{dense, dense_backward};
pub use pool::{maxpool2x2, maxpool2x2_backward};
pub use softmax::{cce_loss, softmax, softmax_rows};

/// Gradients produced by a layer's backward pass.
#[derive(Clone, Debug)]
pub struct LayerGradients<S: Scalar = f32> {
    /// Gradient w.r.t. the layer input, same shape as the forward input.
    pub input_grad: Tensor<S>,
    /// Gradient per parameter, keyed by the layer's parameter name.
    pub param_grads: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> LayerGradients<S> {
    pub fn new(input_grad: Tensor<S>) -> Self {
        LayerGradients { input_grad, param_grads: BTreeMap::new() }
    }

    pub fn with(mut self, name: &str, grad: Tensor<S>) -> Self {
        self.param_grads.insert(name.to_string(), grad);
        self
    }

    pub fn param(&self, name: &str) -> &Tensor<S> {
        &self.param_grads[name]
    }
}
