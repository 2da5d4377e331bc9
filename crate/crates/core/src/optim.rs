use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Piecewise-linear one-cycle learning-rate schedule over whole epochs.
///
/// Ramps from `peak_lr / div_factor` at epoch 0 to `peak_lr` at `peak_epoch`,
/// then decays linearly to `peak_lr / (div_factor * 100)` at the last epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OneCycleSchedule {
    pub peak_lr: f64,
    pub peak_epoch: usize,
    pub total_epochs: usize,
    pub div_factor: f64,
}

impl Default for OneCycleSchedule {
    fn default() -> Self {
        Self { peak_lr: 0.1, peak_epoch: 10, total_epochs: 50, div_factor: 25.0 }
    }
}

impl OneCycleSchedule {
    pub fn new(peak_lr: f64, peak_epoch: usize, total_epochs: usize) -> Result<Self> {
        let s = Self { peak_lr, peak_epoch, total_epochs, ..Self::default() };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_epoch > 0 && self.peak_epoch < self.total_epochs) {
            return Err(Error::InvalidArgument(format!(
                "one-cycle needs 0 < peak_epoch ({}) < total_epochs ({})",
                self.peak_epoch, self.total_epochs
            )));
        }
        if !(self.peak_lr > 0.0) || !(self.div_factor >= 1.0) {
            return Err(Error::InvalidArgument("peak_lr must be > 0 and div_factor >= 1".into()));
        }
        Ok(())
    }

    pub fn initial_lr(&self) -> f64 {
        self.peak_lr / self.div_factor
    }

    pub fn final_lr(&self) -> f64 {
        self.peak_lr / (self.div_factor * 100.0)
    }

    pub fn lr(&self, epoch: usize) -> Result<f64> {
        self.validate()?;
        if epoch >= self.total_epochs {
            return Err(Error::InvalidArgument(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        let (lo, peak) = (self.initial_lr(), self.peak_lr);
        if epoch == self.peak_epoch {
            return Ok(peak);
        }
        if epoch < self.peak_epoch {
            let f = epoch as f64 / self.peak_epoch as f64;
            return Ok(lo + (peak - lo) * f);
        }
        let span = (self.total_epochs - 1 - self.peak_epoch) as f64;
        let f = (epoch - self.peak_epoch) as f64 / span;
        Ok(peak + (self.final_lr() - peak) * f)
    }
}

/// One SGD update with heavy-ball momentum and L2 weight decay:
/// `d = g + wd·θ; buf = μ·buf + d; θ -= lr·buf`.
pub fn sgd_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    momentum_buf: &mut Vec<T>,
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(shape_err("sgd_step", format!("param {:?} vs grad {:?}", param.shape(), grad.shape())));
    }
    if lr < T::zero() {
        return Err(Error::InvalidArgument("learning rate must be non-negative".into()));
    }
    if momentum_buf.len() != param.len() {
        if !momentum_buf.is_empty() {
            return Err(shape_err("sgd_step", "momentum buffer length"));
        }
        momentum_buf.resize(param.len(), T::zero());
    }
    for ((p, &g), b) in param.data_mut().iter_mut().zip(grad.data()).zip(momentum_buf.iter_mut()) {
        let d = if weight_decay == T::zero() { g } else { g + weight_decay * *p };
        *b = if momentum == T::zero() { d } else { momentum * *b + d };
        *p -= lr * *b;
    }
    Ok(())
}

/// SGD state over a set of named parameters.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    buffers: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum: T::lit(momentum), weight_decay: T::lit(weight_decay), buffers: BTreeMap::new() }
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>, lr: T) -> Result<()> {
        let buf = self.buffers.entry(name.to_string()).or_default();
        sgd_step(param, grad, buf, lr, self.momentum, self.weight_decay)
    }
}

/// `dot(a,b) / (‖a‖·‖b‖)`, computed in f64.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err("cosine_similarity", format!("lengths {} vs {}", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64().unwrap_or(f64::NAN), y.to_f64().unwrap_or(f64::NAN));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}
