use serde::{Deserialize, Serialize};

use super::tensor::{ParameterSet, Scalar, Tensor};
use super::AutodiffError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParameterSet<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam step.
pub fn adam_update<T: Scalar>(
    params: &mut ParameterSet<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<(), AutodiffError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(AutodiffError::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.tensor(i).shape() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "gradient {:?} for parameter {} of shape {:?}",
                g.shape(),
                params.name(i),
                params.tensor(i).shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() - T::of(cfg.beta1.powi(t));
    let c2 = T::one() - T::of(cfg.beta2.powi(t));
    let lr = T::of(cfg.lr);
    let eps = T::of(cfg.eps);
    for (i, g) in grads.iter().enumerate() {
        let p = params.tensor_mut(i).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm().to_f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = T::of(max_norm / norm);
        grads.iter_mut().for_each(|g| g.scale(c));
    }
    norm
}
