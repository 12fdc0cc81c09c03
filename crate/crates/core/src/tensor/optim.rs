//! Adagrad with a cosine-annealed learning rate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    /// Steps from `base_lr` down to `min_lr`.
    pub period: usize,
}

impl CosineSchedule {
    /// `min + ½(base − min)(1 + cos(π·step/period))`
    pub fn lr(&self, step: usize) -> f64 {
        if self.period == 0 {
            return self.min_lr;
        }
        let phase = PI * step as f64 / self.period as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + phase.cos())
    }
}

pub fn cosine_lr(step: usize, state: &CosineSchedule) -> f64 {
    state.lr(step)
}

/// Adagrad accumulators plus schedule state.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    accumulators: Vec<Vec<T>>,
    step: usize,
    pub schedule: CosineSchedule,
    pub eps: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(schedule: CosineSchedule) -> Self {
        Self {
            accumulators: Vec::new(),
            step: 0,
            schedule,
            eps: 1e-10,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    pub fn accumulators(&self) -> &[Vec<T>] {
        &self.accumulators
    }

    /// One Adagrad update over `params` (same order on every call), using the
    /// gradient buffer of each tensor; a missing buffer counts as zero.
    /// Returns the learning rate that was applied.
    pub fn adagrad_step<'t, I>(&mut self, params: I) -> Result<f64>
    where
        I: IntoIterator<Item = &'t mut Tensor<T>>,
    {
        let lr = self.current_lr();
        let lr_t = T::of(lr);
        let eps = T::of(self.eps);
        let first = self.accumulators.is_empty();
        let mut seen = 0;
        for (i, param) in params.into_iter().enumerate() {
            seen += 1;
            if first {
                self.accumulators.push(vec![T::zero(); param.numel()]);
            }
            let acc = self
                .accumulators
                .get_mut(i)
                .filter(|a| a.len() == param.numel())
                .ok_or_else(|| Error::shape("adagrad_step", format!("parameter {i} changed shape")))?;
            let Some(grad) = param.grad().map(<[T]>::to_vec) else {
                continue;
            };
            for ((w, a), g) in param.data_mut().iter_mut().zip(acc.iter_mut()).zip(grad) {
                *a += g * g;
                *w -= lr_t * g / (a.sqrt() + eps);
            }
            if !param.is_finite() {
                return Err(Error::NonFinite("adagrad_step"));
            }
        }
        if seen != self.accumulators.len() {
            return Err(Error::shape("adagrad_step", "parameter count changed between steps"));
        }
        self.step += 1;
        Ok(lr)
    }
}

/// Convenience wrapper matching the free-function form.
pub fn adagrad_step<'t, T: Scalar, I>(params: I, state: &mut OptimizerState<T>) -> Result<f64>
where
    I: IntoIterator<Item = &'t mut Tensor<T>>,
{
    state.adagrad_step(params)
}
