use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Moments for a group of parameter sets updated together (e.g. both
/// generators).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<ParamSet>,
    pub v: Vec<ParamSet>,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, group: &[&ParamSet]) -> Self {
        AdamState {
            config,
            m: group.iter().map(|p| p.zeros_like()).collect(),
            v: group.iter().map(|p| p.zeros_like()).collect(),
            t: 0,
        }
    }
}

fn mismatch(what: &str) -> Error {
    Error::Config(format!("adam_step: {what} do not line up with the optimizer state"))
}

/// One bias-corrected Adam update of every tensor in `params`.
///
/// Validation happens before anything is written, so on error neither the
/// parameters nor the state change.
pub fn adam_step(params: &mut [&mut ParamSet], grads: &[ParamSet], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(mismatch("parameter groups"));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(mismatch("parameter counts"));
        }
        for (((pn, pt), (gn, gt)), (_, mt)) in p.iter().zip(g.iter()).zip(m.iter()) {
            if pn != gn || pt.shape() != gt.shape() || pt.shape() != mt.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: pt.shape().to_vec(),
                    rhs: gt.shape().to_vec(),
                });
            }
            if !gt.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {gn}")));
            }
        }
    }

    state.t += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for ((((_, pt), (_, gt)), (_, mt)), (_, vt)) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let shape = pt.shape().to_vec();
            let mut pd = std::mem::replace(pt, Tensor::scalar(0.0)).into_data();
            let mut md = std::mem::replace(mt, Tensor::scalar(0.0)).into_data();
            let mut vd = std::mem::replace(vt, Tensor::scalar(0.0)).into_data();
            for (((pv, &gv), mv), vv) in pd.iter_mut().zip(gt.data()).zip(&mut md).zip(&mut vd) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            *pt = Tensor::from_parts(shape.clone(), pd);
            *mt = Tensor::from_parts(shape.clone(), md);
            *vt = Tensor::from_parts(shape, vd);
        }
    }
    Ok(())
}
