//! Parameter update rules.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Moment-based adaptive update (Adam).
    Adam,
    /// Plain gradient descent.
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adam, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, n_params: usize) -> Self {
        let moments = if config.kind == OptimizerKind::Adam { n_params } else { 0 };
        Self { config, m: vec![T::zero(); moments], v: vec![T::zero(); moments], step: 0 }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T], learning_rate: f64) {
        assert_eq!(params.len(), grad.len());
        self.step += 1;
        let lr = T::of(learning_rate);
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * *g;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (T::of(self.config.beta1), T::of(self.config.beta2));
                let eps = T::of(self.config.eps);
                let t = self.step as i32;
                let c1 = T::one() - b1.powi(t);
                let c2 = T::one() - b2.powi(t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
                    self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut opt = Optimizer::<f64>::new(OptimizerConfig { kind: OptimizerKind::Sgd, ..Default::default() }, 2);
        let mut p = [1.0, 2.0];
        opt.step(&mut p, &[0.5, -1.0], 0.1);
        assert_eq!(p, [0.95, 2.1]);
        assert!(opt.m.is_empty());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Optimizer::<f64>::new(OptimizerConfig::default(), 2);
        let mut p = [0.0, 0.0];
        opt.step(&mut p, &[3.0, -0.2], 0.01);
        assert!((p[0] + 0.01).abs() < 1e-8);
        assert!((p[1] - 0.01).abs() < 1e-8);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut opt = Optimizer::<f32>::new(OptimizerConfig::default(), 1);
        let mut p = [5.0f32];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.5)];
            opt.step(&mut p, &g, 0.05);
        }
        assert!((p[0] - 1.5).abs() < 1e-2);
    }
}
