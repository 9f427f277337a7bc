//! AdamW with decoupled weight decay and warmup learning-rate schedules.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Real, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {index}; step aborted")]
    NonFiniteGradient { index: usize },
    #[error("parameter {index} has shape {param:?} but gradient has shape {grad:?}")]
    ShapeMismatch {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates per parameter and the step counter.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, shapes: &[Vec<usize>]) -> Self {
        AdamW {
            config,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, index: usize) -> (&Tensor<T>, &Tensor<T>) {
        (&self.m[index], &self.v[index])
    }

    /// One update over `(param, grad, lr)` triples in parameter order.
    ///
    /// Every gradient is validated first; on a non-finite value nothing is
    /// modified and the step counter does not advance.
    pub fn step(
        &mut self,
        items: &mut [(&mut Tensor<T>, &Tensor<T>, f64)],
    ) -> Result<(), OptimError> {
        assert_eq!(items.len(), self.m.len(), "parameter count changed");
        for (index, (p, g, _)) in items.iter().enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[index].shape() {
                return Err(OptimError::ShapeMismatch {
                    index,
                    param: p.shape().to_vec(),
                    grad: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(OptimError::NonFiniteGradient { index });
            }
        }
        self.t += 1;
        let c = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        for (index, (p, g, lr)) in items.iter_mut().enumerate() {
            let decay = T::lit(1.0 - *lr * c.weight_decay);
            let step = T::lit(*lr / bc1);
            let inv_bc2 = T::lit(1.0 / bc2);
            let eps = T::lit(c.eps);
            let m = self.m[index].data_mut();
            let v = self.v[index].data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *pi *= decay;
                *pi -= step * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Linear ramp to the peak, then constant.
    WarmupConstant,
    /// Linear ramp to the peak, then linear decay to zero at the last step.
    WarmupLinearDecay,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub warmup: usize,
    pub total: usize,
    pub kind: ScheduleKind,
}

impl LrSchedule {
    /// Multiplier on the peak learning rate at `step` (0-based).
    pub fn factor(&self, step: usize) -> f64 {
        if step < self.warmup {
            return step as f64 / self.warmup as f64;
        }
        match self.kind {
            ScheduleKind::WarmupConstant => 1.0,
            ScheduleKind::WarmupLinearDecay => {
                let span = self.total.saturating_sub(self.warmup).max(1) as f64;
                ((self.total.saturating_sub(step)) as f64 / span).clamp(0.0, 1.0)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(p: f64, g: f64, lr: f64, wd: f64, eps: f64) -> f64 {
        let cfg = AdamWConfig {
            weight_decay: wd,
            eps,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::<f64>::new(cfg, &[vec![1]]);
        let mut pt = Tensor::from_f64(&[1], &[p]);
        let gt = Tensor::from_f64(&[1], &[g]);
        opt.step(&mut [(&mut pt, &gt, lr)]).unwrap();
        assert_eq!(opt.steps_taken(), 1);
        pt.item()
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        assert_eq!(one_param(0.7, 0.0, 0.1, 0.0, 1e-8), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let p = one_param(0.0, 1.0, 0.1, 0.0, 1e-12);
        assert!((p + 0.1).abs() < 1e-10, "{p}");
    }

    #[test]
    fn decoupled_decay() {
        let p = one_param(1.0, 0.0, 0.1, 0.01, 1e-8);
        assert!((p - 0.999).abs() < 1e-12, "{p}");
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut opt = AdamW::<f64>::new(AdamWConfig::default(), &[vec![2]]);
        let mut p = Tensor::from_f64(&[2], &[1.0, 2.0]);
        let g = Tensor::from_f64(&[2], &[0.5, f64::NAN]);
        let err = opt.step(&mut [(&mut p, &g, 0.1)]).unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGradient { index: 0 });
        assert_eq!(p.data(), &[1.0, 2.0]);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn moments_start_at_zero_and_counter_increments() {
        let mut opt = AdamW::<f64>::new(AdamWConfig::default(), &[vec![3]]);
        assert_eq!(opt.moments(0).0.sum(), 0.0);
        assert_eq!(opt.moments(0).1.sum(), 0.0);
        let mut p = Tensor::zeros(&[3]);
        let g = Tensor::from_f64(&[3], &[1.0, 1.0, 1.0]);
        for i in 1..=3 {
            opt.step(&mut [(&mut p, &g, 0.01)]).unwrap();
            assert_eq!(opt.steps_taken(), i);
        }
    }

    #[test]
    fn warmup_schedule() {
        let s = LrSchedule {
            warmup: 500,
            total: 1000,
            kind: ScheduleKind::WarmupConstant,
        };
        assert_eq!(s.factor(0), 0.0);
        assert_eq!(s.factor(250), 0.5);
        assert_eq!(s.factor(500), 1.0);
        assert_eq!(s.factor(999), 1.0);
        let d = LrSchedule {
            kind: ScheduleKind::WarmupLinearDecay,
            ..s
        };
        assert_eq!(d.factor(500), 1.0);
        assert_eq!(d.factor(750), 0.5);
        assert_eq!(d.factor(1000), 0.0);
    }
}
