//! Bias-corrected Adam with decoupled weight decay and a per-parameter
//! freeze mask.
//!
//! Frozen parameters are skipped entirely: they receive no update, no weight
//! decay, and their moment buffers stay zero.

use super::TrainError;
use crate::model::ParamSet;
use crate::numerics::{Array, Scalar};

/// Per-parameter trainable flags, aligned with `ParamSet` slot order.
#[derive(Debug, Clone)]
pub struct FreezeMask {
    frozen: Vec<bool>,
}

impl FreezeMask {
    pub fn none<T: Scalar>(params: &ParamSet<T>) -> Self {
        Self {
            frozen: vec![false; params.len()],
        }
    }

    /// Freezes every parameter whose name starts with one of the prefixes.
    pub fn by_prefix<T: Scalar>(params: &ParamSet<T>, prefixes: &[&str]) -> Self {
        let frozen = (0..params.len())
            .map(|slot| {
                let name = params.name(slot);
                prefixes.iter().any(|p| name.starts_with(p))
            })
            .collect();
        Self { frozen }
    }

    pub fn is_frozen(&self, slot: usize) -> bool {
        self.frozen[slot]
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.iter().filter(|&&f| f).count()
    }
}

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    m: Vec<Array<T>>,
    v: Vec<Array<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            m: params.iter().map(|(_, a)| Array::zeros(a.shape())).collect(),
            v: params.iter().map(|(_, a)| Array::zeros(a.shape())).collect(),
            step: 0,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn moments_are_zero(&self, slot: usize) -> bool {
        self.m[slot].data().iter().all(|v| *v == T::zero())
            && self.v[slot].data().iter().all(|v| *v == T::zero())
    }
}

/// One bias-corrected Adam step with decoupled weight decay on the
/// trainable parameters. A non-finite gradient aborts the step before any
/// parameter is touched.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Array<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    freeze: &FreezeMask,
) -> Result<(), TrainError> {
    assert_eq!(grads.len(), params.len(), "gradient count mismatch");
    for slot in 0..params.len() {
        if freeze.is_frozen(slot) {
            continue;
        }
        if grads[slot].has_non_finite() {
            return Err(TrainError::NonFiniteGradient {
                param: params.name(slot).to_string(),
                step: state.step + 1,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_double(state.beta1);
    let b2 = T::from_double(state.beta2);
    let one = T::one();
    let corr1 = T::from_double(1.0 - state.beta1.powi(t));
    let corr2 = T::from_double(1.0 - state.beta2.powi(t));
    let lr_t = T::from_double(lr);
    let eps = T::from_double(state.eps);
    let wd = T::from_double(state.weight_decay);

    for slot in 0..params.len() {
        if freeze.is_frozen(slot) {
            continue;
        }
        let g = grads[slot].data();
        let m = state.m[slot].data_mut();
        let v = state.v[slot].data_mut();
        let p = params.at_mut(slot).data_mut();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let mhat = m[i] / corr1;
            let vhat = v[i] / corr2;
            p[i] = p[i] - lr_t * (mhat / (vhat.sqrt() + eps) + wd * p[i]);
        }
    }
    Ok(())
}

/// Scales trainable gradients so their global L2 norm is at most
/// `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(
    grads: &mut [Array<T>],
    freeze: &FreezeMask,
    max_norm: f64,
) -> f64 {
    let mut total = 0.0f64;
    for (slot, g) in grads.iter().enumerate() {
        if freeze.is_frozen(slot) {
            continue;
        }
        total += g.data().iter().map(|v| v.to_double() * v.to_double()).sum::<f64>();
    }
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_double(max_norm / norm);
        for (slot, g) in grads.iter_mut().enumerate() {
            if freeze.is_frozen(slot) {
                continue;
            }
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
