//! Adam with decoupled weight decay.

use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::graph::Graph;
use crate::mathf;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled decay: applied directly to the parameter, not to the grad.
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("adam lr", alloc::format!("{}", self.lr)));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(invalid("adam beta", alloc::format!("{name} = {v}")));
            }
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(invalid(
                "adam config",
                alloc::format!("eps = {}, weight_decay = {}", self.eps, self.weight_decay),
            ));
        }
        Ok(())
    }
}

/// One parameter update on raw slices. `t` is the 1-based step count.
pub fn adam_update(
    cfg: &AdamConfig,
    t: u64,
    p: &mut [f32],
    g: &[f32],
    m: &mut [f32],
    v: &mut [f32],
) {
    debug_assert!(t >= 1);
    let bc1 = 1.0 - mathf::powf(cfg.beta1, t as f32);
    let bc2 = 1.0 - mathf::powf(cfg.beta2, t as f32);
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= cfg.lr * (m_hat / (mathf::sqrtf(v_hat) + cfg.eps) + cfg.weight_decay * p[i]);
    }
}

/// Optimizer state for the trainable entries of one `ParamStore`, in store
/// order. Moments are created lazily as zeros.
pub struct AdamState {
    cfg: AdamConfig,
    step_count: u64,
    ids: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        let ids = store.trainable_ids();
        let m = ids.iter().map(|&id| Tensor::zeros(store.value(id).shape())).collect();
        let v = ids.iter().map(|&id| Tensor::zeros(store.value(id).shape())).collect();
        Ok(AdamState { cfg, step_count: 0, ids, m, v })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update using the gradients recorded in `graph`.
    /// Parameters that received no gradient this step are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, graph: &Graph) -> Result<()> {
        self.step_count += 1;
        for (k, &id) in self.ids.iter().enumerate() {
            let Some(grad) = graph.param_grad(id) else { continue };
            let g = grad.data().to_vec();
            adam_update(
                &self.cfg,
                self.step_count,
                store.value_mut(id).data_mut(),
                &g,
                self.m[k].data_mut(),
                self.v[k].data_mut(),
            );
        }
        Ok(())
    }

    /// Moment tensors in update order, for checkpointing.
    pub fn moments(&self) -> impl Iterator<Item = (ParamId, &Tensor, &Tensor)> {
        self.ids.iter().zip(&self.m).zip(&self.v).map(|((&id, m), v)| (id, m, v))
    }

    /// Rebuilds state from checkpointed moments keyed by parameter id.
    pub fn restore(
        store: &ParamStore,
        cfg: AdamConfig,
        step_count: u64,
        mut moments: impl FnMut(ParamId) -> Option<(Tensor, Tensor)>,
    ) -> Result<Self> {
        let mut state = AdamState::new(store, cfg)?;
        state.step_count = step_count;
        for (k, &id) in state.ids.iter().enumerate() {
            if let Some((m, v)) = moments(id) {
                if m.shape() != store.value(id).shape() || v.shape() != store.value(id).shape() {
                    return Err(invalid(
                        "adam moments",
                        alloc::format!("shape mismatch for '{}'", store.name(id)),
                    ));
                }
                state.m[k] = m;
                state.v[k] = v;
            }
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_keeps_params() {
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut p = [1.5f32, -2.0];
        let mut m = [0.0f32; 2];
        let mut v = [0.0f32; 2];
        adam_update(&cfg, 1, &mut p, &[0.0, 0.0], &mut m, &mut v);
        assert_eq!(p, [1.5, -2.0]);
    }

    // First step with unit gradient: bias correction makes m_hat = 1 and
    // v_hat = 1, so the update is lr / (1 + eps), within 1e-9 of lr.
    #[test]
    fn first_step_matches_bias_corrected_oracle() {
        let cfg = AdamConfig { lr: 5e-4, weight_decay: 0.0, ..AdamConfig::default() };
        let mut p = [1.0f32];
        let mut m = [0.0f32];
        let mut v = [0.0f32];
        adam_update(&cfg, 1, &mut p, &[1.0], &mut m, &mut v);
        let expected = 1.0 - 5e-4 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-9, "got {}", p[0]);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        // with zero gradient, only the decay term moves the parameter
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.5, ..AdamConfig::default() };
        let mut p = [2.0f32];
        let mut m = [0.0f32];
        let mut v = [0.0f32];
        adam_update(&cfg, 1, &mut p, &[0.0], &mut m, &mut v);
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-7);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        assert!(AdamConfig { lr: 0.0, ..AdamConfig::default() }.validate().is_err());
        assert!(AdamConfig { beta1: 1.0, ..AdamConfig::default() }.validate().is_err());
        assert!(AdamConfig { weight_decay: -0.1, ..AdamConfig::default() }.validate().is_err());
        assert!(AdamConfig::default().validate().is_ok());
    }
}
