//! SGD with classical momentum and L2 weight decay.

use crate::error::{Result, SpineError};
use crate::tensor::Tensor;

/// Optimizer state: one velocity tensor per parameter tensor.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub velocity: Vec<Tensor>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimState {
    pub fn new(params: &[&Tensor], learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<OptimState> {
        if learning_rate <= 0.0 {
            return Err(SpineError::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(SpineError::InvalidArgument(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        if weight_decay < 0.0 {
            return Err(SpineError::InvalidArgument(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        Ok(OptimState {
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            learning_rate,
            momentum,
            weight_decay,
        })
    }
}

/// One update step:
///   v <- momentum * v + grad + weight_decay * param
///   param <- param - lr * v
///
/// A non-finite gradient entry rejects the whole step, leaving params and
/// velocity untouched.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(SpineError::shape(
            "sgd_step",
            format!("{} parameter tensors", state.velocity.len()),
            format!("{} params, {} grads", params.len(), grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
        if p.shape() != g.shape() {
            return Err(SpineError::shape(
                format!("sgd_step tensor {i}"),
                format!("{:?}", p.shape()),
                format!("{:?}", g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(SpineError::NonFinite(format!("gradient tensor {i}")));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        let lr = state.learning_rate;
        let mu = state.momentum;
        let wd = state.weight_decay;
        for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = mu * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}
