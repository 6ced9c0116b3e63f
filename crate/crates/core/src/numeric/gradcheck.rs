//! Central finite-difference gradient checking in 64-bit arithmetic.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// Compares analytic gradients against central differences.
///
/// `model_fn` returns the scalar value together with one analytic gradient
/// per parameter tensor. The result is
/// `max |analytic - fd| / max(1, |fd|)` over every scalar parameter.
pub fn grad_check<F>(model_fn: F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    let (value, analytic) = model_fn(params)?;
    if !value.is_finite() {
        return Err(Error::NonFinite);
    }
    if analytic.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (p, grad) in analytic.iter().enumerate() {
        if grad.len() != params[p].len() {
            return Err(Error::Shape(format!("gradient {p} has wrong length")));
        }
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            probe[p].data_mut()[i] = orig + FD_STEP;
            let (up, _) = model_fn(&probe)?;
            probe[p].data_mut()[i] = orig - FD_STEP;
            let (down, _) = model_fn(&probe)?;
            probe[p].data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite);
            }
            let fd = (up - down) / (2.0 * FD_STEP);
            let rel = (grad[i] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
