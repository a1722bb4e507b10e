//! SGD with linear warmup and cosine learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        // base_lr is sized for the desk-scale default model with the
        // sum-over-pairs loss; large-scale configs tolerate far larger rates.
        SgdConfig {
            base_lr: 3e-4,
            weight_decay: 1e-4,
            warmup_steps: 500,
            total_steps: 2000,
            momentum: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(Error::config(format!(
                "sgd.base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config(format!(
                "sgd.weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::config(format!(
                "sgd.warmup_steps ({}) exceeds sgd.total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "sgd.momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    /// Learning rate at a 1-based step.
    ///
    /// Linear ramp `base_lr * step / warmup_steps` while `step < warmup_steps`,
    /// then half-cosine from `base_lr` down to 0 at `total_steps`. Steps past
    /// the end clamp to the final value.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return if step >= self.total_steps { 0.0 } else { self.base_lr };
        }
        let t = (step - self.warmup_steps).min(span) as f64 / span as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// SGD state: one velocity buffer per parameter when momentum is enabled.
#[derive(Debug)]
pub struct SgdOptimizer {
    cfg: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl SgdOptimizer {
    pub fn new(cfg: SgdConfig) -> Self {
        SgdOptimizer {
            cfg,
            velocity: Vec::new(),
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    /// One update: `p <- p - lr(step) * (grad + weight_decay * p)`.
    ///
    /// With momentum m > 0 the decayed gradient feeds a velocity buffer
    /// `v <- m*v + (grad + wd*p)` and the update uses `v` instead. The
    /// parameter order must be stable across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], step: u64) -> Result<()> {
        let lr = self.cfg.lr_at(step);
        if self.velocity.is_empty() && self.cfg.momentum > 0.0 {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for (idx, p) in params.iter_mut().enumerate() {
            let grad = p.grad.as_ref().ok_or_else(|| {
                Error::contract(format!("sgd step on parameter {idx} without gradient"))
            })?;
            if grad.len() != p.data.len() {
                return Err(Error::contract(format!(
                    "sgd step: gradient length {} != parameter length {}",
                    grad.len(),
                    p.data.len()
                )));
            }
            if self.cfg.momentum > 0.0 {
                let vel = &mut self.velocity[idx];
                for ((d, &g), v) in p.data.iter_mut().zip(grad).zip(vel.iter_mut()) {
                    *v = self.cfg.momentum * *v + (g + self.cfg.weight_decay * *d);
                    *d -= lr * *v;
                }
            } else {
                // decay uses the pre-update parameter value
                for (d, &g) in p.data.iter_mut().zip(grad.iter()) {
                    *d -= lr * (g + self.cfg.weight_decay * *d);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(warmup: u64, total: u64) -> SgdConfig {
        SgdConfig {
            base_lr: 3e-2,
            weight_decay: 0.0,
            warmup_steps: warmup,
            total_steps: total,
            momentum: 0.0,
        }
    }

    #[test]
    fn lr_hits_base_at_warmup_boundary() {
        let c = cfg(500, 2000);
        assert_eq!(c.lr_at(500), 3e-2);
        assert!((c.lr_at(250) - 1.5e-2).abs() < 1e-15);
        assert_eq!(c.lr_at(0), 0.0);
    }

    #[test]
    fn lr_reaches_zero_at_total_steps() {
        let c = cfg(500, 2000);
        assert!(c.lr_at(2000).abs() < 1e-15);
        // past the end: clamped to final value
        assert!(c.lr_at(5000).abs() < 1e-15);
        // midpoint of the cosine span
        let mid = c.lr_at(1250);
        assert!((mid - 1.5e-2).abs() < 1e-12, "midpoint lr {mid}");
    }

    #[test]
    fn lr_monotone_decreasing_after_warmup() {
        let c = cfg(100, 1000);
        let mut prev = c.lr_at(100);
        for s in 101..=1000 {
            let cur = c.lr_at(s);
            assert!(cur <= prev + 1e-15, "lr increased at step {s}");
            prev = cur;
        }
    }

    #[test]
    fn single_step_reduces_quadratic_loss() {
        // loss = sum(p^2), grad = 2p
        let mut p = Tensor::new(vec![1.0, -2.0, 0.5], vec![3]).unwrap().with_grad();
        p.grad = Some(p.data.iter().map(|v| 2.0 * v).collect());
        let before: f64 = p.data.iter().map(|v| v * v).sum();
        let mut opt = SgdOptimizer::new(cfg(1, 10));
        opt.step(&mut [&mut p], 1).unwrap();
        let after: f64 = p.data.iter().map(|v| v * v).sum();
        assert!(after < before, "loss {before} -> {after}");
    }

    #[test]
    fn weight_decay_shrinks_parameters_without_gradient_signal() {
        let mut p = Tensor::new(vec![1.0], vec![1]).unwrap().with_grad();
        p.grad = Some(vec![0.0]);
        let mut opt = SgdOptimizer::new(SgdConfig {
            weight_decay: 0.5,
            warmup_steps: 1,
            total_steps: 10,
            ..SgdConfig::default()
        });
        opt.step(&mut [&mut p], 1).unwrap();
        assert!(p.data[0] < 1.0 && p.data[0] > 0.0);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        // constant gradient 1: step k moves by lr * (1 + m + ... + m^(k-1))
        let mut p = Tensor::new(vec![0.0], vec![1]).unwrap().with_grad();
        p.grad = Some(vec![1.0]);
        let mut opt = SgdOptimizer::new(SgdConfig {
            base_lr: 1.0,
            weight_decay: 0.0,
            warmup_steps: 1,
            total_steps: 1000,
            momentum: 0.5,
        });
        opt.step(&mut [&mut p], 1).unwrap();
        let after_one = p.data[0];
        opt.step(&mut [&mut p], 1).unwrap();
        let second_move = p.data[0] - after_one;
        assert!((after_one + 1.0).abs() < 1e-12, "first move {after_one}");
        assert!((second_move + 1.5).abs() < 1e-12, "second move {second_move}");
    }

    #[test]
    fn validate_rejects_bad_fields() {
        assert!(SgdConfig { base_lr: 0.0, ..SgdConfig::default() }.validate().is_err());
        assert!(SgdConfig { weight_decay: -1.0, ..SgdConfig::default() }.validate().is_err());
        assert!(SgdConfig { warmup_steps: 11, total_steps: 10, ..SgdConfig::default() }
            .validate()
            .is_err());
        assert!(SgdConfig::default().validate().is_ok());
    }
}
