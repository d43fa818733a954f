//! AdamW, warmup-cosine learning rate and parameter averaging.

use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::params::ModelParams;
use crate::tensor::{real, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
}

impl LrSchedule {
    /// Linear ramp from 0 to peak, then cosine from peak to floor.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.peak_lr;
        }
        let u = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.floor_lr + (self.peak_lr - self.floor_lr) * 0.5 * (1.0 + (std::f64::consts::PI * u).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub config: AdamConfig,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub steps: u64,
}

impl<F: Real> AdamW<F> {
    pub fn new<G: Real>(config: AdamConfig, params: &ModelParams<G>) -> Self {
        let zeros: Vec<Vec<F>> = params.values.iter().map(|v| vec![F::zero(); v.len()]).collect();
        Self { config, m: zeros.clone(), v: zeros, steps: 0 }
    }

    pub fn step(&mut self, params: &mut ModelParams<F>, grads: &[Vec<F>], lr: f64) -> Result<()> {
        if grads.len() != params.values.len() {
            return Err(NetError::Shape("gradient count differs from parameter count".into()));
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2): (F, F) = (real(c.beta1), real(c.beta2));
        let (ob1, ob2): (F, F) = (real(1.0 - c.beta1), real(1.0 - c.beta2));
        let step: F = real(lr / bc1);
        let inv_bc2: F = real(1.0 / bc2);
        let eps: F = real(c.eps);
        let decay: F = real(1.0 - lr * c.weight_decay);
        for (i, g) in grads.iter().enumerate() {
            let (p, m, v) = (&mut params.values[i], &mut self.m[i], &mut self.v[i]);
            if g.len() != p.len() {
                return Err(NetError::Shape(format!("gradient {i} has wrong length")));
            }
            for j in 0..p.len() {
                m[j] = b1 * m[j] + ob1 * g[j];
                v[j] = b2 * v[j] + ob2 * g[j] * g[j];
                p[j] = p[j] * decay - step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Decay used for the parameter average at update `n`: `min(d, (1+n)/(10+n))`.
pub fn ema_decay(d: f64, n: usize) -> f64 {
    d.min((1.0 + n as f64) / (10.0 + n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::NetConfig;
    use rand::SeedableRng;

    fn sched() -> LrSchedule {
        LrSchedule { warmup_steps: 100, total_steps: 1000, peak_lr: 3e-4, floor_lr: 1e-6 }
    }

    #[test]
    fn schedule_endpoints() {
        let s = sched();
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(100) - 3e-4).abs() < 1e-18);
        assert!((s.lr_at(1000) - 1e-6).abs() < 1e-18);
        assert!((s.lr_at(5000) - 1e-6).abs() < 1e-18);
        let desk = LrSchedule { peak_lr: 1e-3, ..sched() };
        assert!((desk.lr_at(100) - 1e-3).abs() < 1e-18);
    }

    #[test]
    fn schedule_is_continuous_at_warmup() {
        let s = LrSchedule { warmup_steps: 1_000_000, total_steps: 2_000_000, peak_lr: 3e-4, floor_lr: 1e-6 };
        let below = s.peak_lr * (s.warmup_steps as f64 - 1e-9) / s.warmup_steps as f64;
        assert!((s.lr_at(s.warmup_steps) - below).abs() < 1e-12);
        assert!((s.lr_at(s.warmup_steps) - s.lr_at(s.warmup_steps - 1)).abs() < 1e-9);
        assert!((s.lr_at(s.warmup_steps + 1) - s.peak_lr).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut r = rand::rngs::StdRng::seed_from_u64(0);
        let mut p = ModelParams::<f64>::init_base(NetConfig::new(3, 4), &mut r).unwrap();
        let before = p.clone();
        let mut opt = AdamW::<f64>::new(AdamConfig::default(), &p);
        let zeros: Vec<Vec<f64>> = p.values.iter().map(|v| vec![0.0; v.len()]).collect();
        for _ in 0..3 {
            opt.step(&mut p, &zeros, 1e-3).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut r = rand::rngs::StdRng::seed_from_u64(1);
        let mut p = ModelParams::<f64>::init_base(NetConfig::new(3, 4), &mut r).unwrap();
        let before = p.clone();
        let mut opt = AdamW::<f64>::new(AdamConfig::default(), &p);
        let grads: Vec<Vec<f64>> = p.values.iter().map(|v| vec![0.5; v.len()]).collect();
        opt.step(&mut p, &grads, 1e-2).unwrap();
        // bias-corrected first step is lr·sign(g) up to ε
        for (a, b) in p.values.iter().flatten().zip(before.values.iter().flatten()) {
            assert!((b - a - 1e-2).abs() < 1e-8);
        }
    }

    #[test]
    fn ema_warmup() {
        assert!((ema_decay(0.999, 0) - 0.1).abs() < 1e-15);
        assert_eq!(ema_decay(0.999, 1_000_000), 0.999);
    }
}
