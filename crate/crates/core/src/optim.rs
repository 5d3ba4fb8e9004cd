//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{bail, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    /// Linear warmup over this many steps, then inverse-square-root decay.
    /// `0` keeps the rate constant.
    pub warmup_steps: u64,
}

impl AdamConfig {
    /// Learning rate of (1-based) step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        let (t, w) = (t.max(1) as f64, self.warmup_steps as f64);
        self.lr * (t / w).min((w / t).sqrt())
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            clip_norm: 1.0,
            warmup_steps: 0,
        }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Moments as named tensors, for checkpointing.
    pub fn to_store(&self, params: &ParamStore) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for (id, name, t) in params.iter() {
            let shape = t.shape().to_vec();
            out.add(
                format!("adam.m.{name}"),
                Tensor::new(shape.clone(), self.m[id.index()].clone())?,
            )?;
            out.add(
                format!("adam.v.{name}"),
                Tensor::new(shape, self.v[id.index()].clone())?,
            )?;
        }
        out.add("adam.step", Tensor::scalar(self.step as f64))?;
        Ok(out)
    }

    pub fn from_store(params: &ParamStore, store: &ParamStore) -> Result<Self> {
        let mut state = Self::new(params);
        for (id, name, t) in params.iter() {
            for (prefix, dst) in [("m", &mut state.m), ("v", &mut state.v)] {
                let key = format!("adam.{prefix}.{name}");
                let Some(sid) = store.id(&key) else {
                    bail!(Checkpoint, "missing `{key}`");
                };
                if store.get(sid).len() != t.len() {
                    bail!(Checkpoint, "size mismatch for `{key}`");
                }
                dst[id.index()] = store.get(sid).data().to_vec();
            }
        }
        let Some(step) = store.id("adam.step") else {
            bail!(Checkpoint, "missing `adam.step`");
        };
        state.step = store.get(step).data()[0] as u64;
        Ok(state)
    }
}

/// Clips `grads` to `max_norm` (global L2) in place.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
}

/// One Adam update of every parameter in `ids` (all parameters when `None`).
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
    ids: Option<&[ParamId]>,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let lr = cfg.lr_at(state.step);
    let all: Vec<ParamId>;
    let ids = match ids {
        Some(ids) => ids,
        None => {
            all = params.ids().collect();
            &all
        }
    };
    for &id in ids {
        let g = grads.get(id);
        let m = &mut state.m[id.index()];
        let v = &mut state.v[id.index()];
        let w = params.get_mut(id).data_mut();
        for i in 0..w.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            w[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    fn quadratic_store(w0: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(w0)).unwrap();
        (store, id)
    }

    fn quad_grad(store: &ParamStore, id: ParamId) -> (f64, Gradients) {
        let mut g = Graph::new(store);
        let w = g.param(id);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        let value = g.value(loss).data()[0];
        (value, g.backward(loss).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut store, id) = quadratic_store(0.7);
        let before = store.clone();
        let mut state = AdamState::new(&store);
        let grads = Gradients::zeros(&store);
        adam_step(&mut store, &grads, &mut state, &AdamConfig::default(), None);
        assert_eq!(store.get(id), before.get(id));
    }

    #[test]
    fn one_step_on_square_decreases_loss() {
        let (mut store, id) = quadratic_store(1.0);
        let mut state = AdamState::new(&store);
        let (f0, grads) = quad_grad(&store, id);
        adam_step(&mut store, &grads, &mut state, &AdamConfig::default(), None);
        let (f1, _) = quad_grad(&store, id);
        assert!(f1 < f0, "{f1} !< {f0}");
    }

    #[test]
    fn updates_are_bit_identical_across_runs() {
        let run = || {
            let (mut store, id) = quadratic_store(1.0);
            let mut state = AdamState::new(&store);
            for _ in 0..10 {
                let (_, grads) = quad_grad(&store, id);
                adam_step(&mut store, &grads, &mut state, &AdamConfig::default(), None);
            }
            (store.get(id).data()[0].to_bits(), state)
        };
        assert_eq!(run(), run());
    }
}
