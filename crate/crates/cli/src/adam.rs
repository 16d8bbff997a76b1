//! Adam optimizer over a parameter store, with one first/second-moment pair
//! per parameter slot and per-slot step counts so bias correction stays
//! exact when a slot's update is skipped.

use serde::{Deserialize, Serialize};
use svo_core::diffmath::{ParameterStore, SlotId};
use svo_core::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::InvalidArgument {
                what: "AdamConfig",
                why: format!(
                    "need lr > 0, betas in [0, 1), eps > 0; got lr={}, betas=({}, {}), eps={}",
                    self.learning_rate, self.beta1, self.beta2, self.eps
                ),
            });
        }
        Ok(())
    }
}

/// First/second moments and step counts, one entry per store slot.
pub struct AdamState {
    steps: Vec<u64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParameterStore) -> Self {
        let sizes: Vec<usize> = store.slot_ids().map(|id| store.values(id).len()).collect();
        Self {
            steps: vec![0; sizes.len()],
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn index(&self, store: &ParameterStore, id: SlotId) -> usize {
        store
            .slot_ids()
            .position(|s| s == id)
            .expect("slot belongs to the store")
    }
}

/// One descent step on every slot present in `grads` (gradients point toward
/// larger loss; callers maximizing an objective pass the negated gradient).
///
/// A slot whose gradient contains a non-finite value is skipped entirely —
/// parameters and moments untouched — and a warning naming the leaf is
/// returned for the caller to log.
pub fn adam_step(
    store: &mut ParameterStore,
    grads: &[(SlotId, Vec<f64>)],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<Vec<String>> {
    cfg.validate()?;
    let mut warnings = Vec::new();
    for (id, g) in grads {
        let slot = state.index(store, *id);
        if g.len() != store.values(*id).len() {
            return Err(Error::InvalidArgument {
                what: "adam_step",
                why: format!(
                    "gradient for `{}` has {} entries, parameter has {}",
                    store.name(*id),
                    g.len(),
                    store.values(*id).len()
                ),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            warnings.push(format!(
                "skipping update for `{}`: non-finite gradient",
                store.name(*id)
            ));
            continue;
        }
        state.steps[slot] += 1;
        let t = state.steps[slot] as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        let params = store.values_mut(*id);
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(warnings)
}
