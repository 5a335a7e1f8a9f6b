use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over every parameter, then zeroes the
/// gradients. Nothing is modified if any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
    if let Some((_, p)) = store.iter().find(|(_, p)| !p.gradient.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
    }
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let p = store.get_mut(id);
        p.step_count += 1;
        let t = p.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let g = p.gradient.data().to_vec();
        let m = p.adam_m.data_mut();
        for (m, &g) in m.iter_mut().zip(&g) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        }
        let v = p.adam_v.data_mut();
        for (v, &g) in v.iter_mut().zip(&g) {
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        }
        let (m, v) = (p.adam_m.data().to_vec(), p.adam_v.data().to_vec());
        let w = p.tensor.data_mut();
        for i in 0..w.len() {
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        p.gradient = Tensor::zeros(p.tensor.shape());
    }
    Ok(())
}
