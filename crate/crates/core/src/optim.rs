//! Adam with linear learning-rate warm-up.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 8e-5,
            warmup_steps: 3000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("optimizer: lr must be positive and betas in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || self.grad_clip < 0.0 {
            return Err(Error::Config("optimizer: eps must be positive, grad_clip non-negative".into()));
        }
        Ok(())
    }

    /// Rate at zero-based `step`: linear ramp over `warmup_steps`, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: OptimConfig,
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: usize,
}

impl Adam {
    pub fn new(cfg: OptimConfig, params: &ParamStore) -> Self {
        Self {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// One update in name order. Returns the rate used.
    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<f64> {
        let lr = self.cfg.lr_at(self.step);
        self.step += 1;
        let scale = if self.cfg.grad_clip > 0.0 {
            let norm = grads.iter().map(|(_, g)| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
            if norm > self.cfg.grad_clip {
                self.cfg.grad_clip / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?;
            let m = self.m.get_mut(name)?;
            let v = self.v.get_mut(name)?;
            if g.len() != p.len() {
                return Err(Error::Format(format!("gradient shape mismatch for {name}")));
            }
            let (pd, gd) = (p.data_mut(), g.data());
            for (i, x) in pd.iter_mut().enumerate() {
                let gi = gd[i] * scale;
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (1.0 - b1) * gi;
                let mhat = *mi / c1;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let vhat = *vi / c2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mvd_tensor::Tensor;

    #[test]
    fn warmup_is_linear() {
        let c = OptimConfig {
            lr: 1.0,
            warmup_steps: 4,
            ..OptimConfig::default()
        };
        let r: Vec<f64> = (0..6).map(|s| c.lr_at(s)).collect();
        assert_eq!(r, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::new(&[2], vec![3.0, -2.0]).unwrap()).unwrap();
        let mut opt = Adam::new(
            OptimConfig {
                lr: 0.1,
                warmup_steps: 0,
                grad_clip: 0.0,
                ..OptimConfig::default()
            },
            &p,
        );
        for _ in 0..500 {
            let mut g = ParamStore::new();
            g.insert("x", p.get("x").unwrap().map(|v| 2.0 * v)).unwrap();
            opt.update(&mut p, &g).unwrap();
        }
        assert!(p.get("x").unwrap().norm() < 1e-2);
    }
}
