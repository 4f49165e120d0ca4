use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// What to do when a gradient contains NaN or infinity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonFinitePolicy {
    /// Leave parameters and moments untouched for this step.
    #[default]
    Skip,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        AdamState {
            config,
            m: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, idx: usize) -> &[f64] {
        &self.m[idx]
    }

    pub fn second_moment(&self, idx: usize) -> &[f64] {
        &self.v[idx]
    }
}

/// One bias-corrected Adam update over every parameter.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    policy: NonFinitePolicy,
) -> Result<StepOutcome> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::InvalidShape(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (id, g) in params.ids().zip(grads) {
        if g.shape() != params.get(id).shape() {
            return Err(Error::InvalidShape(format!(
                "gradient for {} has shape {:?}, parameter {:?}",
                params.name(id),
                g.shape(),
                params.get(id).shape()
            )));
        }
    }
    if let Some((id, _)) = params.ids().zip(grads).find(|(_, g)| !g.is_finite()) {
        return match policy {
            NonFinitePolicy::Skip => Ok(StepOutcome::Skipped),
            NonFinitePolicy::Fail => Err(Error::NonFinite(params.name(id).to_string())),
        };
    }

    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let ids: Vec<_> = params.ids().collect();
    for (idx, id) in ids.into_iter().enumerate() {
        let p = params.get_mut(id).data_mut();
        let g = grads[idx].data();
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(StepOutcome::Applied)
}
