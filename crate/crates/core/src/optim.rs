use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// SGD with classical momentum and L2 weight decay added to the gradient:
///
/// ```text
/// v <- mu * v + (g + wd * p)
/// p <- p - lr * v
/// ```
pub struct SgdOptimizer<S: Scalar> {
    params: Vec<Tensor<S>>,
    velocity: Vec<Vec<S>>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl<S: Scalar> SgdOptimizer<S> {
    pub fn new(params: Vec<Tensor<S>>, learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        let velocity = params.iter().map(|p| vec![S::zero(); p.numel()]).collect();
        SgdOptimizer {
            params,
            velocity,
            learning_rate,
            momentum,
            weight_decay,
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Apply one update. Every parameter must hold a gradient buffer
    /// (zero_grads before backward guarantees this).
    pub fn step(&mut self) -> Result<()> {
        let lr = S::from_f64(self.learning_rate);
        let mu = S::from_f64(self.momentum);
        let wd = S::from_f64(self.weight_decay);
        for (idx, p) in self.params.iter().enumerate() {
            let grad = p.grad().ok_or_else(|| {
                CoreError::invalid(format!(
                    "sgd_step: parameter {idx} has no gradient; call zero_grads + backward first"
                ))
            })?;
            let vel = &mut self.velocity[idx];
            let mut data = p.data_mut();
            for i in 0..data.len() {
                let g = grad[i] + wd * data[i];
                vel[i] = mu * vel[i] + g;
                data[i] = data[i] - lr * vel[i];
            }
        }
        Ok(())
    }
}
