//! Adam with global gradient-norm clipping.

use super::OptimizerConfig;
use crate::error::{shape_err, Result};
use crate::math::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: OptimizerConfig,
    /// Number of updates applied so far.
    pub t: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: OptimizerConfig, shapes: &[&[usize]]) -> Self {
        let zeros: Vec<Tensor<T>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        Self { config, t: 0, first: zeros.clone(), second: zeros }
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(grads: &[Tensor<T>]) -> f64 {
        grads.iter().map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>()).sum::<f64>().sqrt()
    }

    /// Clips `grads` to the configured norm, then applies one update.
    /// Returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<f64> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(shape_err(format!("{} parameters, {} gradients, {} moment slots", params.len(), grads.len(), self.first.len())));
        }
        let norm = Self::grad_norm(grads);
        let scale = if norm > self.config.clip_norm { self.config.clip_norm / norm } else { 1.0 };
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let one = T::one();
        let correction1 = T::lit(1.0 - c.beta1.powi(self.t as i32));
        let correction2 = T::lit(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps, scale) = (T::lit(c.learning_rate), T::lit(c.epsilon), T::lit(scale));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(shape_err(format!("gradient {i} has shape {:?}, parameter {:?}", g.shape(), p.shape())));
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gj = gj * scale;
                *mj = b1 * *mj + (one - b1) * gj;
                *vj = b2 * *vj + (one - b2) * gj * gj;
                let mhat = *mj / correction1;
                let vhat = *vj / correction2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}
