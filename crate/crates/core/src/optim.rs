//! Adam moment accumulators.

use serde::{Deserialize, Serialize};

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
    }

    pub fn norm(&self) -> f64 {
        self.m
            .iter()
            .chain(&self.v)
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Bias-corrected update; `step` is 1-based.
    pub fn step<T: Scalar>(
        &mut self,
        cfg: &AdamConfig,
        params: &mut [T],
        grads: &[T],
        lr: f64,
        step: u64,
    ) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        let c1 = 1.0 - cfg.beta1.powi(step as i32);
        let c2 = 1.0 - cfg.beta2.powi(step as i32);
        for k in 0..params.len() {
            let g = grads[k].as_f64();
            self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * g;
            self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * g * g;
            let upd = lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + cfg.eps);
            params[k] -= T::of(upd);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut m = Moments::new(3);
        let mut p = [1.0f32, 1.0, 1.0];
        m.step(&AdamConfig::default(), &mut p, &[2.0, -0.5, 0.0], 0.1, 1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - 1.1).abs() < 1e-6);
        assert_eq!(p[2], 1.0);
    }

    #[test]
    fn reset_zeroes_moments() {
        let mut m = Moments::new(2);
        let mut p = [0.0f64; 2];
        m.step(&AdamConfig::default(), &mut p, &[1.0, 2.0], 0.1, 1);
        assert!(m.norm() > 0.0);
        m.reset();
        assert_eq!(m.norm(), 0.0);
    }
}
