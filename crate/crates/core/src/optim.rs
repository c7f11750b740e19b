//! Adam with bias correction over a named list of parameter tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First/second moment buffers congruent to the parameter list, plus the
/// shared step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        Self {
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update across all parameters. `grads[i]` pairs
/// with `params[i]`; a missing gradient leaves that parameter untouched.
pub fn adam_step(
    params: &mut [(String, &mut Tensor)],
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "adam_step arity mismatch: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - BETA1.powf(t);
    let bc2 = 1.0 - BETA2.powf(t);
    for (i, (name, param)) in params.iter_mut().enumerate() {
        let Some(grad) = &grads[i] else { continue };
        if grad.shape() != param.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: param.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        if grad.data().iter().any(|g| g.is_nan()) {
            return Err(Error::contract(format!("NaN gradient for parameter {name}")));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = param.data_mut();
        for ((pj, mj), (vj, &gj)) in
            p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut().zip(grad.data()))
        {
            *mj = BETA1 * *mj + (1.0 - BETA1) * gj;
            *vj = BETA2 * *vj + (1.0 - BETA2) * gj * gj;
            let m_hat = *mj / bc1;
            let v_hat = *vj / bc2;
            *pj -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
    Ok(())
}
