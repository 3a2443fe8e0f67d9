use serde::{Deserialize, Serialize};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        Self { config, m: vec![0.0; num_params], v: vec![0.0; num_params], step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * params[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = vec![0.3, -2.0, 5.0];
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.0, ..Default::default() }, 3);
        opt.update(&mut p, &[1.0, -1.0, 0.5]);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m_hat = g, v_hat = g^2, so the step is lr * (sign(g) * |g| / (|g| + eps) + wd * theta).
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, eps: 1e-8, ..Default::default() };
        let mut p = vec![2.0];
        let mut opt = AdamW::new(cfg, 1);
        opt.update(&mut p, &[4.0]);
        let expect = 2.0 - 0.1 * (4.0 / (4.0 + 1e-8) + 0.5 * 2.0);
        assert!((p[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = vec![3.0, -4.0];
        let mut opt = AdamW::new(AdamWConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() }, 2);
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            opt.update(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2, "{p:?}");
    }
}
