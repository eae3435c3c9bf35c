//! Adam and SGD with momentum over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    Sgd { lr: f64, momentum: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd() -> Self {
        Optimizer::Sgd { lr: 0.05, momentum: 0.9 }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::Adam { lr, .. } | Optimizer::Sgd { lr, .. } => lr,
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        match self {
            Optimizer::Adam { beta1, beta2, eps, .. } => Optimizer::Adam { lr, beta1, beta2, eps },
            Optimizer::Sgd { momentum, .. } => Optimizer::Sgd { lr, momentum },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
            Optimizer::Sgd { lr, momentum } => lr > 0.0 && (0.0..1.0).contains(&momentum),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }
}

fn check_len(a: usize, b: usize, c: usize) -> Result<()> {
    if a != b || a != c {
        return Err(Error::shape(format!("parameter, gradient and state lengths {a}, {b}, {c} differ")));
    }
    Ok(())
}

/// One bias-corrected Adam step; advances `state.t`.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    check_len(params.len(), grads.len(), state.m.len())?;
    check_len(params.len(), state.v.len(), state.m.len())?;
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(beta1), T::of(beta2));
    let c1 = T::one() - T::of(beta1.powi(t));
    let c2 = T::one() - T::of(beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(eps));
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

/// `v <- momentum * v + g; theta <- theta - lr * v`.
pub fn sgd_momentum_step<T: Scalar>(params: &mut [T], grads: &[T], velocity: &mut [T], lr: f64, momentum: f64) -> Result<()> {
    check_len(params.len(), grads.len(), velocity.len())?;
    let (lr, mu) = (T::of(lr), T::of(momentum));
    for i in 0..params.len() {
        velocity[i] = mu * velocity[i] + grads[i];
        params[i] -= lr * velocity[i];
    }
    Ok(())
}

/// Optimizer together with its per-parameter state.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState<T> {
    Adam(AdamState<T>),
    Sgd(Vec<T>),
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(opt: &Optimizer, n: usize) -> Self {
        match opt {
            Optimizer::Adam { .. } => OptimizerState::Adam(AdamState::new(n)),
            Optimizer::Sgd { .. } => OptimizerState::Sgd(vec![T::zero(); n]),
        }
    }

    pub fn step(&mut self, opt: &Optimizer, params: &mut [T], grads: &[T]) -> Result<()> {
        match (self, *opt) {
            (OptimizerState::Adam(s), Optimizer::Adam { lr, beta1, beta2, eps }) => {
                adam_step(params, grads, s, lr, beta1, beta2, eps)
            }
            (OptimizerState::Sgd(v), Optimizer::Sgd { lr, momentum }) => sgd_momentum_step(params, grads, v, lr, momentum),
            _ => Err(Error::invalid("optimizer state does not match optimizer")),
        }
    }
}
