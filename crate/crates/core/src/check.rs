//! Finite-difference verification helpers.
//!
//! The directional-derivative oracle evaluates the loss twice per direction
//! through the forward path only, so it stays independent of the backward
//! pass it is used to check.

use crate::model::ParamSet;
use crate::numerics::Array;
use crate::rng::Rng;

/// A random unit direction over the full parameter vector.
pub fn random_direction(params: &ParamSet<f64>, rng: &mut Rng) -> Vec<Array<f64>> {
    let mut dir: Vec<Array<f64>> = params
        .iter()
        .map(|(_, a)| {
            let mut d = Array::zeros(a.shape());
            for v in d.data_mut() {
                *v = rng.normal();
            }
            d
        })
        .collect();
    let norm: f64 = dir
        .iter()
        .map(|a| a.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    for a in dir.iter_mut() {
        for v in a.data_mut() {
            *v /= norm;
        }
    }
    dir
}

/// Central finite difference of `f` along `direction` at the current params.
pub fn fd_directional(
    params: &ParamSet<f64>,
    direction: &[Array<f64>],
    eps: f64,
    mut f: impl FnMut(&ParamSet<f64>) -> f64,
) -> f64 {
    let shifted = |sign: f64| {
        let mut p = params.clone();
        for slot in 0..p.len() {
            let d = &direction[slot];
            for (v, &dv) in p.at_mut(slot).data_mut().iter_mut().zip(d.data()) {
                *v += sign * eps * dv;
            }
        }
        p
    };
    let plus = f(&shifted(1.0));
    let minus = f(&shifted(-1.0));
    (plus - minus) / (2.0 * eps)
}

/// Analytic directional derivative: gradient dot direction.
pub fn grad_dot_direction(grads: &[Array<f64>], direction: &[Array<f64>]) -> f64 {
    grads
        .iter()
        .zip(direction)
        .map(|(g, d)| {
            g.data()
                .iter()
                .zip(d.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
        .sum()
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-10)
}
