//! AdamW with decoupled weight decay and a plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Fine-tuning epsilon used for SAE adaptation runs.
pub const FINETUNE_EPSILON: f64 = 6.25e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(self, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted as a null optimizer.
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid AdamW settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<F> {
    pub step_count: u64,
    pub first_moment: Vec<F>,
    pub second_moment: Vec<F>,
}

impl<F: Real> AdamWState<F> {
    pub fn new(n_params: usize) -> Self {
        Self {
            step_count: 0,
            first_moment: vec![F::zero(); n_params],
            second_moment: vec![F::zero(); n_params],
        }
    }

    /// One AdamW update of `params` in place.
    pub fn step(&mut self, params: &mut [F], grads: &[F], cfg: &AdamWConfig) -> Result<()> {
        let n = self.first_moment.len();
        for len in [params.len(), grads.len(), self.second_moment.len()] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: len,
                });
            }
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(i));
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = F::from_f64(cfg.beta1);
        let b2 = F::from_f64(cfg.beta2);
        let one = F::one();
        let bc1 = F::from_f64(1.0 - cfg.beta1.powi(t));
        let bc2 = F::from_f64(1.0 - cfg.beta2.powi(t));
        let lr = F::from_f64(cfg.learning_rate);
        let eps = F::from_f64(cfg.epsilon);
        let decay = F::from_f64(1.0 - cfg.learning_rate * cfg.weight_decay);

        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            if cfg.weight_decay != 0.0 {
                *p *= decay;
            }
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Halves the learning rate when the monitored metric (higher is better)
/// stalls for `patience` epochs, at most `max_reductions` times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub factor: f64,
    pub patience: usize,
    pub max_reductions: usize,
    pub reductions_done: usize,
    pub best_metric: f64,
    pub epochs_since_best: usize,
}

impl Default for PlateauSchedule {
    fn default() -> Self {
        Self::new(0.5, 3, 2)
    }
}

impl PlateauSchedule {
    pub fn new(factor: f64, patience: usize, max_reductions: usize) -> Self {
        Self {
            factor,
            patience,
            max_reductions,
            reductions_done: 0,
            best_metric: f64::NEG_INFINITY,
            epochs_since_best: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) || self.patience == 0 {
            return Err(Error::InvalidConfig(format!(
                "plateau factor must lie in (0,1) and patience be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Fresh schedule with the same parameters.
    pub fn reset(&self) -> Self {
        Self::new(self.factor, self.patience, self.max_reductions)
    }

    /// Returns `(new_lr, improved)`.
    pub fn update(&mut self, metric: f64, current_lr: f64) -> (f64, bool) {
        if metric > self.best_metric {
            self.best_metric = metric;
            self.epochs_since_best = 0;
            return (current_lr, true);
        }
        self.epochs_since_best += 1;
        if self.epochs_since_best >= self.patience && self.reductions_done < self.max_reductions {
            self.reductions_done += 1;
            self.epochs_since_best = 0;
            return (current_lr * self.factor, false);
        }
        (current_lr, false)
    }
}
