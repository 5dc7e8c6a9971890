//! Named, grouped parameter storage shared by the frontend, the backbone,
//! the optimizer, and checkpoints.
//!
//! Registration order is fixed by the model schema, so iterating entries is
//! deterministic; initialization draws from a per-tensor seed derived from
//! the parameter name, so adding a tensor never shifts another's init.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::{Element, Tape, Tensor, Var};
use crate::rng::{child_seed, rng_from};

pub type ParamId = usize;

/// The four trainable module groups the fine-tuning selector can pick from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleGroup {
    /// Video projection + positional/mask embeddings + contextual video stack.
    Video,
    Audio,
    Language,
    /// The shared cross-modal encoder-decoder.
    CrossModal,
}

impl ModuleGroup {
    pub const ALL: [ModuleGroup; 4] = [
        ModuleGroup::Video,
        ModuleGroup::Audio,
        ModuleGroup::Language,
        ModuleGroup::CrossModal,
    ];
}

impl std::str::FromStr for ModuleGroup {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "video" => Ok(ModuleGroup::Video),
            "audio" => Ok(ModuleGroup::Audio),
            "language" => Ok(ModuleGroup::Language),
            "cross_modal" | "cross-modal" | "cross" => Ok(ModuleGroup::CrossModal),
            other => Err(format!(
                "unknown module group '{other}' (expected video|audio|language|cross_modal)"
            )),
        }
    }
}

pub struct ParamEntry<E> {
    pub name: String,
    pub tensor: Tensor<E>,
    pub group: ModuleGroup,
    /// Participates in decoupled weight decay (weight matrices only).
    pub decay: bool,
}

/// Ordered collection of all trainable tensors.
pub struct ParamStore<E = f32> {
    entries: Vec<ParamEntry<E>>,
    by_name: HashMap<String, ParamId>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<E>,
        group: ModuleGroup,
        decay: bool,
    ) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            tensor,
            group,
            decay,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<E>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.entries[id].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<E> {
        &self.entries[id]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Total scalar parameter count.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.register(e.name.clone(), e.tensor.cast::<F>(), e.group, e.decay);
        }
        out
    }

    /// Put every parameter on a tape, in registration order. The returned
    /// vector is indexed by [`ParamId`].
    pub fn inject(&self, tape: &mut Tape<E>) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| tape.param(e.tensor.clone()))
            .collect()
    }
}

/// Normal(0, std) init from a seed derived off the parameter name.
pub fn init_normal<E: Element>(
    seed: u64,
    name: &str,
    rows: usize,
    cols: usize,
    std: f64,
) -> Tensor<E> {
    let mut rng = rng_from(child_seed(seed, name));
    let data: Vec<E> = (0..rows * cols)
        .map(|_| E::from_f64(rng.sample::<f64, _>(StandardNormal) * std))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("positive dims")
}

pub const INIT_STD: f64 = 0.02;

/// Linear layer handles: weight `in x out` plus bias `1 x out`.
#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearIds {
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        seed: u64,
        name: &str,
        d_in: usize,
        d_out: usize,
        group: ModuleGroup,
    ) -> Self {
        let w = store.register(
            format!("{name}.w"),
            init_normal(seed, &format!("{name}.w"), d_in, d_out, INIT_STD),
            group,
            true,
        );
        let b = store.register(format!("{name}.b"), Tensor::zeros(1, d_out), group, false);
        LinearIds { w, b }
    }

    /// `x W + b` on the tape.
    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        vars: &[Var],
        x: Var,
    ) -> crate::numerics::Result<Var> {
        let xw = tape.matmul(x, vars[self.w])?;
        tape.add_rowvec(xw, vars[self.b])
    }
}

/// Layer-norm gain/bias handles.
#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormIds {
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        d: usize,
        group: ModuleGroup,
    ) -> Self {
        let gamma = store.register(
            format!("{name}.gamma"),
            Tensor::filled(1, d, E::one()),
            group,
            false,
        );
        let beta = store.register(format!("{name}.beta"), Tensor::zeros(1, d), group, false);
        NormIds { gamma, beta }
    }

    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        vars: &[Var],
        x: Var,
        eps: E,
    ) -> crate::numerics::Result<Var> {
        let n = tape.layer_norm(x, eps)?;
        let g = tape.mul_rowvec(n, vars[self.gamma])?;
        tape.add_rowvec(g, vars[self.beta])
    }
}
