use crate::error::{HcwError, Result};
use crate::net::model::NetworkParams;
use crate::net::tape::ParamGrads;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Decoupled (AdamW-style) decay coefficient.
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        let zeros: Vec<Tensor> = params
            .entries
            .iter()
            .map(|e| Tensor::zeros(e.value.shape()))
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &ParamGrads,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.grads.len() != params.len() || state.first.len() != params.len() {
        return Err(HcwError::validation(
            "gradient / optimizer state count does not match the parameters",
        ));
    }
    for (entry, g) in params.entries.iter().zip(&grads.grads) {
        if g.shape() != entry.value.shape() {
            return Err(HcwError::validation(format!(
                "gradient for {} has shape {:?}, parameter is {:?}",
                entry.name,
                g.shape(),
                entry.value.shape()
            )));
        }
        if !g.is_finite() {
            return Err(HcwError::numeric(format!(
                "non-finite gradient for parameter {}",
                entry.name
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, entry) in params.entries.iter_mut().enumerate() {
        let g = grads.grads[i].data();
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (j, p) in entry.value.data_mut().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *p -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *p);
        }
        if !entry.value.is_finite() {
            return Err(HcwError::numeric(format!(
                "parameter {} became non-finite",
                entry.name
            )));
        }
    }
    Ok(())
}
