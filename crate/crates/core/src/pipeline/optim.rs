use serde::{Deserialize, Serialize};

use crate::blocks::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: `θ ← θ − lr·wd·θ` on every parameter.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of the flat parameter vector.
    pub fn update(&mut self, theta: &mut [f64], grad: &[f64]) {
        assert_eq!(theta.len(), self.m.len(), "parameter count changed");
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * theta[i]);
        }
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) {
        let mut theta = params.flatten();
        self.update(&mut theta, &grads.flatten());
        params.assign_flat(&theta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_only_decays() {
        let mut opt = AdamW::new(AdamWConfig::default(), 3);
        let mut theta = vec![1.0, -2.0, 0.5];
        opt.update(&mut theta, &[0.0; 3]);
        let f = 1.0 - 1e-3 * 0.01;
        assert_eq!(theta, vec![f, -2.0 * f, 0.5 * f]);
    }

    #[test]
    fn quadratic_converges() {
        let target = [0.3, -1.2, 2.0, 0.0];
        let cfg = AdamWConfig {
            lr: 1e-2,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, 4);
        let mut theta = vec![0.0; 4];
        let loss = |t: &[f64]| t.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        for _ in 0..2000 {
            let g: Vec<f64> = theta.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            opt.update(&mut theta, &g);
        }
        assert!(loss(&theta) < 1e-6, "loss {}", loss(&theta));
    }
}
