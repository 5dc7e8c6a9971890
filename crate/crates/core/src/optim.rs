//! Adam with decoupled weight decay.
//!
//! Decay applies only to parameters registered with `decay = true` (weight
//! matrices); biases, norm gains, mask and positional embeddings are
//! excluded. Updates touch only the selected module groups so frozen modules
//! stay bit-identical.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::params::{ModuleGroup, ParamStore};

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.01
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamHyper {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
        }
    }
}

/// First/second moment buffers, index-aligned with the parameter store.
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = store
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.tensor.rows(), e.tensor.cols()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Global gradient norm over the selected parameters (None entries count as
/// zero).
pub fn global_grad_norm(
    store: &ParamStore<f32>,
    grads: &[Option<&Tensor<f32>>],
    selected: &HashSet<ModuleGroup>,
) -> f64 {
    let mut sq = 0.0f64;
    for (id, e) in store.entries().iter().enumerate() {
        if !selected.contains(&e.group) {
            continue;
        }
        if let Some(g) = grads[id] {
            sq += f64::from(g.squared_norm());
        }
    }
    sq.sqrt()
}

/// One AdamW update. `grad_scale` multiplies every gradient (gradient
/// clipping is a scale computed by the caller); parameters outside
/// `selected` are untouched, including their moment buffers.
pub fn adamw_step(
    store: &mut ParamStore<f32>,
    state: &mut AdamState,
    grads: &[Option<&Tensor<f32>>],
    lr: f64,
    grad_scale: f64,
    hyper: &AdamHyper,
    selected: &HashSet<ModuleGroup>,
) {
    state.t += 1;
    let t = state.t as i32;
    let b1 = hyper.beta1 as f32;
    let b2 = hyper.beta2 as f32;
    let bc1 = 1.0 - (hyper.beta1 as f32).powi(t);
    let bc2 = 1.0 - (hyper.beta2 as f32).powi(t);
    let eps = hyper.eps as f32;
    let lr32 = lr as f32;
    let scale = grad_scale as f32;
    for (id, grad) in grads.iter().enumerate().take(store.len()) {
        let (group, decay) = {
            let e = store.entry(id);
            (e.group, e.decay)
        };
        if !selected.contains(&group) {
            continue;
        }
        let wd = if decay { hyper.weight_decay as f32 } else { 0.0 };
        let m = state.m[id].data_mut();
        let v = state.v[id].data_mut();
        let theta = store.get_mut(id).data_mut();
        let update = |p: &mut f32, m: &mut f32, v: &mut f32, g: f32| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr32 * (mhat / (vhat.sqrt() + eps) + wd * *p);
        };
        match grad {
            Some(g) => {
                for (((p, mi), vi), &gi) in theta
                    .iter_mut()
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                    .zip(g.data())
                {
                    update(p, mi, vi, gi * scale);
                }
            }
            None => {
                for ((p, mi), vi) in theta.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                    update(p, mi, vi, 0.0);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_two() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.register("w", Tensor::filled(1, 2, 1.0), ModuleGroup::Video, true);
        s.register("b", Tensor::filled(1, 2, 1.0), ModuleGroup::Audio, false);
        s
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut store = store_with_two();
        let mut state = AdamState::new(&store);
        let g = Tensor::filled(1, 2, 0.5);
        let grads = vec![Some(&g), Some(&g)];
        let selected: HashSet<_> = ModuleGroup::ALL.into_iter().collect();
        adamw_step(
            &mut store,
            &mut state,
            &grads,
            0.0,
            1.0,
            &AdamHyper::default(),
            &selected,
        );
        assert_eq!(store.get(0).data(), &[1.0, 1.0]);
        assert_eq!(store.get(1).data(), &[1.0, 1.0]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn unselected_groups_are_bit_identical() {
        let mut store = store_with_two();
        let mut state = AdamState::new(&store);
        let g = Tensor::filled(1, 2, 0.5);
        let grads = vec![Some(&g), Some(&g)];
        let selected: HashSet<_> = [ModuleGroup::Video].into_iter().collect();
        adamw_step(
            &mut store,
            &mut state,
            &grads,
            1e-2,
            1.0,
            &AdamHyper::default(),
            &selected,
        );
        assert_ne!(store.get(0).data(), &[1.0, 1.0]);
        assert_eq!(store.get(1).data(), &[1.0, 1.0]);
        assert_eq!(state.m[1].data(), &[0.0, 0.0]);
    }

    #[test]
    fn decay_only_touches_decay_flagged_params() {
        let mut store = store_with_two();
        let mut state = AdamState::new(&store);
        // zero gradients: the only movement is weight decay
        let grads = vec![None, None];
        let selected: HashSet<_> = ModuleGroup::ALL.into_iter().collect();
        adamw_step(
            &mut store,
            &mut state,
            &grads,
            0.1,
            1.0,
            &AdamHyper::default(),
            &selected,
        );
        assert!(store.get(0).data()[0] < 1.0, "weight should decay");
        assert_eq!(store.get(1).data(), &[1.0, 1.0], "bias must not decay");
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // single scalar, g = 0.5, defaults: update = lr * g/|g| = lr (plus decay)
        let mut store = ParamStore::new();
        store.register("w", Tensor::scalar(2.0f32), ModuleGroup::Video, false);
        let mut state = AdamState::new(&store);
        let g = Tensor::scalar(0.5f32);
        let grads = vec![Some(&g)];
        let selected: HashSet<_> = ModuleGroup::ALL.into_iter().collect();
        adamw_step(
            &mut store,
            &mut state,
            &grads,
            0.001,
            1.0,
            &AdamHyper::default(),
            &selected,
        );
        // m-hat = g, v-hat = g^2, so step ~= lr * g / (|g| + eps) ~= lr
        let got = store.get(0).item();
        assert!((got - (2.0 - 0.001)).abs() < 1e-6, "got {got}");
    }
}
