use crate::error::{FedError, Result};
use crate::nn::stack::LayerStack;
use crate::tensor::Tensor;

/// SGD with classical momentum: `v <- mu * v + g; w <- w - lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub momentum: f64,
    buffers: Vec<Tensor>,
}

impl OptimState {
    pub fn new(lr: f64, momentum: f64, shapes: &[&Tensor]) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(FedError::Config(format!("lr must be >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(FedError::Config(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            buffers: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        })
    }

    pub fn for_stack(lr: f64, momentum: f64, stack: &LayerStack) -> Result<Self> {
        Self::new(lr, momentum, &stack.params())
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    pub fn step(&mut self, weights: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if weights.len() != grads.len() || weights.len() != self.buffers.len() {
            return Err(FedError::shape(
                "sgd tensor count",
                &[self.buffers.len()],
                &[weights.len(), grads.len()],
            ));
        }
        for ((w, g), v) in weights.iter().zip(grads).zip(&self.buffers) {
            w.check_same_shape(g, "sgd grad")?;
            w.check_same_shape(v, "sgd momentum buffer")?;
        }
        for ((w, g), v) in weights.into_iter().zip(grads).zip(&mut self.buffers) {
            for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + gi;
                *wi -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

/// Applies one optimizer step to every weight of `stack`.
pub fn sgd_step(stack: &mut LayerStack, grads: &[Tensor], state: &mut OptimState) -> Result<()> {
    state.step(stack.params_mut(), grads)
}
