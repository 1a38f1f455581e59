//! Adam with linear warmup to a constant learning rate.

use serde::{Deserialize, Serialize};

use crate::params::{ParamGrads, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_ratio: f64,
    /// Global-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_ratio: 0.05,
            clip_norm: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (self.warmup_ratio * total_steps as f64).ceil() as usize
    }

    /// Learning rate for 0-based `step`.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let w = self.warmup_steps(total_steps);
        if w == 0 || step >= w {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / w as f64
        }
    }
}

pub struct Adam {
    cfg: OptimConfig,
    m: ParamGrads,
    v: ParamGrads,
    t: usize,
    total_steps: usize,
}

impl Adam {
    pub fn new(cfg: OptimConfig, params: &ParamSet, total_steps: usize) -> Self {
        let zeros: ParamGrads = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
            total_steps,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamGrads) {
        let lr = self.cfg.lr_at(self.t, self.total_steps);
        self.t += 1;
        let norm = crate::params::grad_norm(grads);
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.tensor_mut(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] * clip;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * mh / (vh.sqrt() + self.cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Tensor;

    #[test]
    fn warmup_is_ceil_of_ratio_then_constant() {
        let c = OptimConfig::default();
        assert_eq!(c.warmup_steps(100), 5);
        assert_eq!(c.warmup_steps(101), 6);
        assert!((c.lr_at(0, 100) - 2e-4).abs() < 1e-15);
        assert_eq!(c.lr_at(4, 100), 1e-3);
        assert_eq!(c.lr_at(50, 100), 1e-3);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = ParamSet::new();
        p.add("x", Tensor::filled(&[3], 2.0));
        let cfg = OptimConfig {
            lr: 0.05,
            warmup_ratio: 0.0,
            ..Default::default()
        };
        let mut opt = Adam::new(cfg, &p, 500);
        for _ in 0..500 {
            let g = vec![p.tensor(0).data().iter().map(|x| 2.0 * x).collect()];
            opt.step(&mut p, &g);
        }
        assert!(p.tensor(0).data().iter().all(|x| x.abs() < 1e-2));
    }
}
