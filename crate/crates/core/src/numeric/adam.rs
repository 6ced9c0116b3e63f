use std::collections::BTreeMap;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-parameter Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize, lr: T) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
            lr,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
        }
    }
}

/// One bias-corrected Adam update. Consumes and clears `param`'s gradient.
pub fn adam_step<T: Scalar>(name: &str, param: &mut Tensor<T>, state: &mut AdamState<T>) -> Result<()> {
    let grad = param.take_grad().ok_or_else(|| Error::MissingGrad(name.to_string()))?;
    if state.m.len() != grad.len() || state.v.len() != grad.len() {
        return Err(Error::Shape(format!("adam state for `{name}` has wrong length")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::one() - state.beta1.powi(t);
    let bc2 = T::one() - state.beta2.powi(t);
    let one = T::one();
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(&grad).zip(&mut state.m).zip(&mut state.v) {
        *m = state.beta1 * *m + (one - state.beta1) * g;
        *v = state.beta2 * *v + (one - state.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p - state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Adam over a whole [`ParamSet`], one state per named tensor.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    lr: T,
    states: BTreeMap<String, AdamState<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Self { lr, states: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        for (name, tensor) in params.iter_mut() {
            if !tensor.requires_grad() {
                continue;
            }
            let state = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(tensor.len(), self.lr));
            adam_step(name, tensor, state)?;
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.states.values().map(|s| s.step).max().unwrap_or(0)
    }
}
