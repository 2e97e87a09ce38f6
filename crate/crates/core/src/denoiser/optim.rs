//! Adam with bias correction and an exponential moving average of weights.

use serde::{Deserialize, Serialize};

use super::network::DenoiserParams;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmaConfig {
    pub decay: f64,
    /// Before this step the average simply tracks the raw weights.
    pub start: u64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        EmaConfig { decay: 0.9999, start: 5_000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: DenoiserParams<f32>,
    pub ema: DenoiserParams<f32>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
    pub adam: AdamConfig,
    pub ema_cfg: EmaConfig,
}

impl TrainState {
    pub fn new(params: DenoiserParams<f32>, adam: AdamConfig, ema_cfg: EmaConfig) -> Self {
        let n = params.len();
        TrainState { ema: params.clone(), params, m: vec![0.0; n], v: vec![0.0; n], step: 0, adam, ema_cfg }
    }
}

pub fn adam_step(state: &mut TrainState, grads: &[f32]) -> Result<()> {
    if grads.len() != state.params.len() {
        return Err(Error::shape(format!("{} gradients for {} parameters", grads.len(), state.params.len())));
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.adam;
    let bc1 = 1.0 - beta1.powi(state.step.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - beta2.powi(state.step.min(i32::MAX as u64) as i32);
    let (b1, b2) = (beta1 as f32, beta2 as f32);
    let (bc1, bc2, lr, eps) = (bc1 as f32, bc2 as f32, lr as f32, eps as f32);
    let p = state.params.as_mut_slice();
    for i in 0..p.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// `ema <- d * ema + (1 - d) * params` once `step >= start`; copies the raw
/// weights before that.
pub fn ema_update(state: &mut TrainState) {
    let EmaConfig { decay, start } = state.ema_cfg;
    let src = state.params.as_slice();
    let dst = state.ema.as_mut_slice();
    if state.step < start {
        dst.copy_from_slice(src);
        return;
    }
    if decay == 0.0 {
        dst.copy_from_slice(src);
        return;
    }
    // Increment form keeps `ema == params` an exact fixed point.
    let one_minus = (1.0 - decay) as f32;
    for (e, &p) in dst.iter_mut().zip(src) {
        *e += one_minus * (p - *e);
    }
}
