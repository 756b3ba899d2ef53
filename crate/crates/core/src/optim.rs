//! Adam with decoupled weight decay, plus learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<S: Scalar>(&mut self, params: &mut [S], grad: &[S], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let g = g.as_f64();
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
            let mut x = p.as_f64();
            if weight_decay > 0.0 {
                x -= lr * weight_decay * x;
            }
            *p = S::of(x - lr * update);
        }
    }
}

/// Scale `grad` so its L2 norm is at most `max_norm`; returns the original norm.
pub fn clip_grad_norm<S: Scalar>(grad: &mut [S], max_norm: f64) -> f64 {
    let norm = grad
        .iter()
        .map(|g| {
            let g = g.as_f64();
            g * g
        })
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = S::of(max_norm / norm);
        for g in grad.iter_mut() {
            *g = *g * s;
        }
    }
    norm
}

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(lr_max: f64, lr_min: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps <= 1 {
        return lr_max;
    }
    let progress = (step.min(total_steps - 1)) as f64 / (total_steps - 1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0f64, -2.0];
        let mut opt = Adam::new(2, AdamConfig::default());
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut x, &g, 0.01);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut x = vec![1.5f32, 2.5];
        let mut opt = Adam::new(2, AdamConfig::default());
        opt.step(&mut x, &[1.0, -1.0], 0.0);
        assert_eq!(x, vec![1.5, 2.5]);
    }

    #[test]
    fn cosine_endpoints() {
        assert!((cosine_lr(1e-6, 8e-7, 0, 100) - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(1e-6, 8e-7, 99, 100) - 8e-7).abs() < 1e-18);
        let mid = cosine_lr(1.0, 0.0, 50, 101);
        assert!((mid - 0.5).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![3.0f64, 4.0];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }
}
