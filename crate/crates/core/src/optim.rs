//! Trainable parameters and SGD with momentum and weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum: Tensor,
    grad_ready: bool,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        let momentum = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            momentum,
            grad_ready: false,
        }
    }

    /// Stores the gradient from a completed backward pass.
    pub fn set_grad(&mut self, grad: Tensor) -> Result<()> {
        if grad.shape() != self.value.shape() {
            return Err(Error::shape(
                "set_grad",
                format!("{:?} vs {:?}", grad.shape(), self.value.shape()),
            ));
        }
        self.grad = grad;
        self.grad_ready = true;
        Ok(())
    }

    pub fn grad_ready(&self) -> bool {
        self.grad_ready
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        self.grad_ready = false;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

/// Rescales the gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before rescaling.
pub fn clip_grad_norm<'a, I>(params: I, max_norm: f64) -> f64
where
    I: IntoIterator<Item = &'a mut Parameter>,
{
    let mut params: Vec<&mut Parameter> = params.into_iter().collect();
    let norm = params.iter().map(|p| p.grad.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        for p in &mut params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= c);
        }
    }
    norm
}

/// `v ← β·v + g + λ·w; w ← w − η·v`, then zeroes the gradients.
pub fn sgd_step<'a, I>(params: I, cfg: SgdConfig) -> Result<()>
where
    I: IntoIterator<Item = &'a mut Parameter>,
{
    let params: Vec<&mut Parameter> = params.into_iter().collect();
    if params.iter().any(|p| !p.grad_ready) {
        return Err(Error::GradientsNotReady);
    }
    for p in params {
        let Parameter {
            value, grad, momentum, ..
        } = p;
        for ((w, g), v) in value.data_mut().iter_mut().zip(grad.data()).zip(momentum.data_mut()) {
            *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
            *w -= cfg.lr * *v;
        }
        p.zero_grad();
    }
    Ok(())
}
