//! Nesterov SGD and the polynomial learning-rate schedule.

use crate::scalar::Scalar;

pub const MOMENTUM: f64 = 0.9;

/// SGD with Nesterov momentum: `v ← μv + g`, `θ ← θ − lr·(g + μv)`.
#[derive(Debug, Clone)]
pub struct NesterovSgd<T> {
    momentum: T,
    velocity: Vec<T>,
}

impl<T: Scalar> NesterovSgd<T> {
    pub fn new(num_params: usize, momentum: f64) -> Self {
        Self { momentum: T::from_f64_lossy(momentum), velocity: vec![T::zero(); num_params] }
    }

    pub fn velocity(&self) -> &[T] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T], lr: f64) {
        assert_eq!(params.len(), grad.len(), "gradient length");
        assert_eq!(params.len(), self.velocity.len(), "optimizer state length");
        let lr = T::from_f64_lossy(lr);
        let mu = self.momentum;
        for ((p, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = mu * *v + g;
            *p -= lr * (g + mu * *v);
        }
    }
}

/// `initial · (1 − epoch/epochs)^exponent`, reaching zero after the last epoch.
pub fn poly_lr(initial: f64, epoch: usize, epochs: usize, exponent: f64) -> f64 {
    if epochs == 0 || epoch >= epochs {
        return 0.0;
    }
    initial * (1.0 - epoch as f64 / epochs as f64).powf(exponent)
}
