//! Bias-corrected Adam over flattened parameter vectors.

use super::Scalar;
use crate::error::{Error, Result};

/// Adam moment decay rates and stability epsilon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(num_params: usize) -> AdamState<T> {
        AdamState {
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update over a flat parameter vector.
///
/// Increments the state's step counter, then applies
/// `theta -= lr * m_hat / (sqrt(v_hat) + eps)`. A non-finite gradient aborts
/// with an error before any state is touched.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    lr: T,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient passed to adam_step".into()));
    }

    state.t += 1;
    let t = state.t as i32;
    let beta1 = T::from(config.beta1).unwrap();
    let beta2 = T::from(config.beta2).unwrap();
    let eps = T::from(config.epsilon).unwrap();
    let bias1 = T::one() - beta1.powi(t);
    let bias2 = T::one() - beta2.powi(t);

    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (T::one() - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (T::one() - beta2) * g * g;
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
