//! Bias-corrected Adam.

use crate::autodiff::ParamSet;
use crate::error::{shape_err, Result};
use crate::ndtensor::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments shaped like `params`, β = (0.9, 0.999), ε = 1e−8.
    pub fn new(params: &ParamSet<T>, lr: f64) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One update of every parameter from its gradient (same order as
/// `params`).
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(shape_err!(
            "{} gradients and {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        ));
    }
    state.step += 1;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let c1 = T::lit(1.0 - state.beta1.powi(state.step as i32));
    let c2 = T::lit(1.0 - state.beta2.powi(state.step as i32));
    let (lr, eps) = (T::lit(state.lr), T::lit(state.eps));
    for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let g = &grads[i];
        let p = params.get(id);
        if g.shape() != p.shape() {
            return Err(shape_err!("gradient {:?} for parameter {:?}", g.shape(), p.shape()));
        }
        let m = state.m[i].zip_map(g, |m, g| b1 * m + (T::one() - b1) * g)?;
        let v = state.v[i].zip_map(g, |v, g| b2 * v + (T::one() - b2) * g * g)?;
        let update = m.zip_map(&v, |m, v| lr * (m / c1) / ((v / c2).sqrt() + eps))?;
        let next = p.zip_map(&update, |p, u| p - u)?;
        params.set(id, next)?;
        state.m[i] = m;
        state.v[i] = v;
    }
    Ok(())
}
