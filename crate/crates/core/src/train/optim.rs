//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// `eta_min + (lr0 - eta_min) (1 + cos(pi step / total)) / 2`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, eta_min: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(param_err!("cosine_lr: step {step} outside 0..={total}"));
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    Ok(eta_min + 0.5 * (lr0 - eta_min) * (1.0 + phase.cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Moments stored per parameter in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar> {
    /// Updates applied so far.
    pub step: u64,
    pub names: Vec<String>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::from_parts(t.shape().to_vec(), vec![T::from_f64(0.0); t.numel()])).collect();
        Self { step: 0, names: params.iter().map(|(_, n, _)| n.to_string()).collect(), m: zeros(), v: zeros() }
    }
}

/// One AdamW update. `grads` pairs each parameter name with its gradient,
/// in registration order.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[(String, Tensor<T>)],
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
    lr: f64,
) -> Result<()> {
    let mismatch = |m: String| Err(Error::Optimizer(m));
    if state.names.len() != params.len() || grads.len() != params.len() {
        return mismatch(format!("{} parameters, {} gradients, {} optimizer slots", params.len(), grads.len(), state.names.len()));
    }
    for ((id, name, p), (gname, g)) in params.iter().zip(grads) {
        if name != gname || name != state.names[id.index()] {
            return mismatch(format!("slot {}: parameter {name}, gradient {gname}, state {}", id.index(), state.names[id.index()]));
        }
        if p.shape() != g.shape() || p.shape() != state.m[id.index()].shape() {
            return mismatch(format!("{name}: parameter {:?}, gradient {:?}, moment {:?}", p.shape(), g.shape(), state.m[id.index()].shape()));
        }
    }
    let t = state.step as i32 + 1;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let decay = 1.0 - lr * hyper.weight_decay;
    for (i, (_, g)) in grads.iter().enumerate() {
        let id = params.id(&state.names[i]).expect("names verified above");
        let p = params.tensor_mut(id).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            let g = g.to_f64();
            let mn = b1 * m.to_f64() + (1.0 - b1) * g;
            let vn = b2 * v.to_f64() + (1.0 - b2) * g * g;
            let update = (mn / c1) / ((vn / c2).sqrt() + hyper.eps);
            *p = T::from_f64(p.to_f64() * decay - lr * update);
            *m = T::from_f64(mn);
            *v = T::from_f64(vn);
        }
    }
    state.step += 1;
    Ok(())
}
