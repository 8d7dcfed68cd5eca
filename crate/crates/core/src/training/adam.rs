//! Adam with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub lr_decay: f64,
    /// Validation rounds without improvement before the learning rate decays.
    pub lr_patience: usize,
    pub validation_every: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 400,
            patience: 20,
            lr_decay: 0.5,
            lr_patience: 3,
            validation_every: 2,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.epsilon, self.lr_decay];
        if positive.iter().any(|v| !(*v > 0.0)) || self.weight_decay < 0.0 {
            return Err(Error::Config("optimizer rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.lr_patience == 0 {
            return Err(Error::Config("batch size, epochs and patience must be >= 1".into()));
        }
        if self.validation_every == 0 {
            return Err(Error::Config("validation_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct Adam<T> {
    moments: Vec<(Vec<T>, Vec<T>)>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new() -> Self {
        Self {
            moments: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `params` with the matching gradient.
    /// Parameter order must stay the same between calls.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[&Tensor<T>], lr: f64, cfg: &OptimizerConfig) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!("{} parameters, {} gradients", params.len(), grads.len())));
        }
        if self.moments.is_empty() {
            self.moments = params.iter().map(|p| (vec![T::zero(); p.len()], vec![T::zero(); p.len()])).collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::State("optimizer state does not match parameter list".into()));
        }
        for ((p, g), (m, _)) in params.iter().zip(grads).zip(&self.moments) {
            if p.shape() != g.shape() || m.len() != p.len() {
                return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let c1 = T::lit(1.0 - cfg.beta1.powi(t));
        let c2 = T::lit(1.0 - cfg.beta2.powi(t));
        let lr_t = T::lit(lr);
        let decay = T::lit(1.0 - lr * cfg.weight_decay);
        let eps = T::lit(cfg.epsilon);
        for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(&mut self.moments) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w = *w * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
