//! The optimization loop: cosine-annealed AdamW over the masked forward
//! pass, with loss toggles, a trainable-module selector, JSON-lines metrics,
//! and bit-exact checkpoint resume.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{encode_batch, ModelIds};
use crate::checkpoint::{self, CheckpointData};
use crate::corpus::{sample_windows, Corpus, CorpusError, ShotSequenceSample};
use crate::frontend::{MaskPlan, ModelConfig};
use crate::numerics::{NumericsError, Tape, Tensor};
use crate::objectives::{total_loss, LossBreakdown, LossToggles};
use crate::optim::{adamw_step, global_grad_norm, AdamHyper, AdamState};
use crate::params::{ModuleGroup, ParamStore};
use crate::rng::{child_seed, child_seed_n, rng_from};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error("metrics i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("non-finite loss at step {step}{}", last_good_note(.last_good))]
    NonFinite {
        step: u64,
        last_good: Option<PathBuf>,
    },
    #[error("train config: {0}")]
    Config(String),
}

fn last_good_note(p: &Option<PathBuf>) -> String {
    match p {
        Some(p) => format!("; last good checkpoint: {}", p.display()),
        None => "; no checkpoint written yet".into(),
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn default_steps() -> usize {
    2000
}
fn default_batch() -> usize {
    32
}
fn default_lr_max() -> f64 {
    1e-3
}
fn default_tau() -> f64 {
    0.3
}
fn default_k() -> usize {
    30
}
fn default_mask_rate() -> f64 {
    0.2
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}
fn default_ckpt_every() -> usize {
    500
}
fn default_trainable() -> Vec<ModuleGroup> {
    ModuleGroup::ALL.to_vec()
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr_max")]
    pub lr_max: f64,
    #[serde(default)]
    pub lr_min: f64,
    #[serde(flatten)]
    pub adam: AdamHyper,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Window stride; defaults to `k` (non-overlapping windows).
    #[serde(default)]
    pub stride: Option<usize>,
    #[serde(default = "default_mask_rate")]
    pub mask_rate: f64,
    #[serde(default)]
    pub toggles: LossToggles,
    #[serde(default = "default_trainable")]
    pub trainable: Vec<ModuleGroup>,
    #[serde(default)]
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables (gradient-check parity).
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    #[serde(default = "default_ckpt_every")]
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: default_steps(),
            batch_size: default_batch(),
            lr_max: default_lr_max(),
            lr_min: 0.0,
            adam: AdamHyper::default(),
            tau: default_tau(),
            k: default_k(),
            stride: None,
            mask_rate: default_mask_rate(),
            toggles: LossToggles::default(),
            trainable: default_trainable(),
            seed: 0,
            clip_norm: default_clip(),
            checkpoint_every: default_ckpt_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.k == 0 {
            return Err(TrainError::Config("batch size and k must be >= 1".into()));
        }
        if !(0.0 <= self.lr_min && self.lr_min <= self.lr_max) {
            return Err(TrainError::Config(format!(
                "need 0 <= lr_min ({}) <= lr_max ({})",
                self.lr_min, self.lr_max
            )));
        }
        if self.trainable.is_empty() {
            return Err(TrainError::Config("trainable module set is empty".into()));
        }
        self.toggles.validate()?;
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(TrainError::Config(format!("tau {} must be > 0", self.tau)));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.k)
    }

    pub fn selected(&self) -> HashSet<ModuleGroup> {
        self.trainable.iter().copied().collect()
    }
}

/// The checkpoint-embedded configuration: training hyperparameters plus the
/// model dimensions needed to rebuild the parameter schema.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

/// Cosine learning-rate annealing:
/// `lr(t) = lr_min + (lr_max - lr_min) (1 + cos(pi t / T)) / 2`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(TrainError::Config(
            "cosine schedule needs total steps >= 1".into(),
        ));
    }
    let t = step.min(total) as f64 / total as f64;
    Ok(lr_min + (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0)
}

pub struct TrainState {
    pub store: ParamStore<f32>,
    pub ids: ModelIds,
    pub opt: AdamState,
    pub step: u64,
    pub run: RunConfig,
}

impl TrainState {
    pub fn init(run: RunConfig) -> Result<Self> {
        run.train.validate()?;
        run.model.validate()?;
        let (store, ids) = ModelIds::init::<f32>(&run.model, run.train.seed)?;
        let opt = AdamState::new(&store);
        log::info!(
            "initialized model: {} tensors, {} parameters",
            store.len(),
            store.n_scalars()
        );
        Ok(TrainState {
            opt,
            step: 0,
            ids,
            run,
            store,
        })
    }

    pub fn n_parameters(&self) -> usize {
        self.store.n_scalars()
    }
}

/// One optimization step over a batch: masked forward, backward, clipped
/// AdamW update restricted to the selected module groups.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&ShotSequenceSample],
    lr: f64,
) -> Result<LossBreakdown> {
    let k = state.run.train.k;
    if batch.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    if let Some(bad) = batch.iter().find(|s| s.k() != k) {
        return Err(TrainError::Config(format!(
            "window with k = {} in a k = {k} run",
            bad.k()
        )));
    }
    let mask_seed = child_seed_n(state.run.train.seed, "mask", state.step);
    let klens: Vec<usize> = batch.iter().map(|s| s.k()).collect();
    let slens: Vec<usize> = batch.iter().map(|s| s.s()).collect();
    let plan = MaskPlan::build(state.run.train.mask_rate, &klens, &klens, &slens, mask_seed)?;

    let mut tape = Tape::new();
    let vars = state.store.inject(&mut tape);
    let enc = encode_batch(
        &mut tape,
        &vars,
        &state.ids,
        &state.run.model,
        batch,
        Some(&plan),
    )?;
    let losses = total_loss(
        &mut tape,
        &enc,
        batch,
        &state.run.train.toggles,
        state.run.train.tau,
    )?;
    let breakdown = losses.breakdown(&tape);
    if !breakdown.total.is_finite() {
        return Err(TrainError::NonFinite {
            step: state.step,
            last_good: None,
        });
    }
    let grads = tape.backward(losses.total)?;
    let grad_refs: Vec<Option<&Tensor<f32>>> = vars.iter().map(|v| grads.grad(*v)).collect();
    let selected = state.run.train.selected();
    let grad_scale = match state.run.train.clip_norm {
        Some(clip) => {
            let norm = global_grad_norm(&state.store, &grad_refs, &selected);
            if norm > clip {
                clip / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    adamw_step(
        &mut state.store,
        &mut state.opt,
        &grad_refs,
        lr,
        grad_scale,
        &state.run.train.adam,
        &selected,
    );
    state.step += 1;
    Ok(breakdown)
}

/// The batch for a given step: `batch_size` windows taken cyclically from
/// the shuffled window list. Stateless in the step index, so resume
/// reproduces the exact same batches.
pub fn batch_for_step(
    windows: &[ShotSequenceSample],
    step: u64,
    batch_size: usize,
) -> Vec<&ShotSequenceSample> {
    let w = windows.len();
    (0..batch_size)
        .map(|j| &windows[((step as usize) * batch_size + j) % w])
        .collect()
}

/// Drive training from the state's current step to the configured total,
/// invoking `on_step` after every update.
pub fn train_loop(
    state: &mut TrainState,
    windows: &[ShotSequenceSample],
    mut on_step: impl FnMut(u64, f64, &LossBreakdown) -> Result<()>,
) -> Result<()> {
    let total = state.run.train.steps;
    let batch_size = state.run.train.batch_size;
    while (state.step as usize) < total {
        let lr = cosine_lr(
            state.step as usize,
            total,
            state.run.train.lr_max,
            state.run.train.lr_min,
        )?;
        let batch = batch_for_step(windows, state.step, batch_size);
        let breakdown = train_step(state, &batch, lr)?;
        on_step(state.step, lr, &breakdown)?;
    }
    Ok(())
}

/// One metrics line per step, exactly these fields.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct MetricsLine {
    pub step: u64,
    pub intra: f64,
    pub inter: f64,
    pub cross: f64,
    pub total: f64,
    pub lr: f64,
}

pub struct PretrainArtifacts {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub final_loss: Option<LossBreakdown>,
    pub n_parameters: usize,
}

/// Full pretraining run over a corpus: sample windows, train, write periodic
/// checkpoints and a JSON-lines metrics log, and save the final checkpoint.
pub fn pretrain(
    corpus: &Corpus,
    run: RunConfig,
    out_checkpoint: &Path,
    metrics_path: &Path,
) -> Result<PretrainArtifacts> {
    run.train.validate()?;
    run.model.validate()?;
    let windows = sample_windows(corpus, run.train.k, run.train.stride(), run.train.seed)?;
    let mut state = TrainState::init(run)?;
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(metrics_path)?);
    let every = state.run.train.checkpoint_every;
    let mut last_good: Option<PathBuf> = None;
    let mut final_loss = None;

    let total = state.run.train.steps;
    let batch_size = state.run.train.batch_size;
    while (state.step as usize) < total {
        let lr = cosine_lr(
            state.step as usize,
            total,
            state.run.train.lr_max,
            state.run.train.lr_min,
        )?;
        let batch = batch_for_step(&windows, state.step, batch_size);
        let breakdown = match train_step(&mut state, &batch, lr) {
            Err(TrainError::NonFinite { step, .. }) => {
                return Err(TrainError::NonFinite {
                    step,
                    last_good: last_good.clone(),
                });
            }
            other => other?,
        };
        let line = MetricsLine {
            step: state.step - 1,
            intra: breakdown.intra,
            inter: breakdown.inter,
            cross: breakdown.cross,
            total: breakdown.total,
            lr,
        };
        serde_json::to_writer(&mut metrics, &line)
            .map_err(|e| TrainError::Config(format!("metrics serialization: {e}")))?;
        metrics.write_all(b"\n")?;
        final_loss = Some(breakdown);
        if every > 0 && (state.step as usize).is_multiple_of(every) && (state.step as usize) < total {
            let path = periodic_path(out_checkpoint, state.step);
            save_checkpoint(&state, &path)?;
            last_good = Some(path);
        }
    }
    metrics.flush()?;
    save_checkpoint(&state, out_checkpoint)?;
    Ok(PretrainArtifacts {
        checkpoint: out_checkpoint.to_path_buf(),
        metrics: metrics_path.to_path_buf(),
        final_loss,
        n_parameters: state.store.n_scalars(),
    })
}

fn periodic_path(final_path: &Path, step: u64) -> PathBuf {
    let stem = final_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("checkpoint");
    let ext = final_path
        .extension()
        .and_then(|s| s.to_str())
        .unwrap_or("ckpt");
    final_path.with_file_name(format!("{stem}.step{step}.{ext}"))
}

/// Serialize parameters, optimizer moments, and the run config.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let config_json = serde_json::to_string(&state.run)
        .map_err(|e| TrainError::Config(format!("config serialization: {e}")))?;
    let mut tensors: Vec<(String, Tensor<f32>)> = Vec::with_capacity(state.store.len() * 3);
    for e in state.store.entries() {
        tensors.push((e.name.clone(), e.tensor.clone()));
    }
    for (id, e) in state.store.entries().iter().enumerate() {
        tensors.push((format!("optim.m.{}", e.name), state.opt.m[id].clone()));
        tensors.push((format!("optim.v.{}", e.name), state.opt.v[id].clone()));
    }
    checkpoint::save(
        path,
        &CheckpointData {
            config_json,
            step: state.step,
            rng_seed: state.run.train.seed,
            tensors,
        },
    )?;
    Ok(())
}

/// Rebuild a full training state from a checkpoint, bit-exactly.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let data = checkpoint::load(path)?;
    let run: RunConfig = serde_json::from_str(&data.config_json)
        .map_err(|e| TrainError::Config(format!("embedded config: {e}")))?;
    let (mut store, ids) = ModelIds::init::<f32>(&run.model, run.train.seed)?;
    let mut opt = AdamState::new(&store);
    let by_name: std::collections::HashMap<&str, &Tensor<f32>> = data
        .tensors
        .iter()
        .map(|(n, t)| (n.as_str(), t))
        .collect();
    for id in 0..store.len() {
        let name = store.entry(id).name.clone();
        let shape = store.get(id).shape();
        let restore = |key: &str| -> Result<Tensor<f32>> {
            let t = by_name.get(key).ok_or_else(|| {
                TrainError::Config(format!("checkpoint is missing tensor {key}"))
            })?;
            if t.shape() != shape {
                return Err(TrainError::Config(format!(
                    "checkpoint tensor {key} has shape {:?}, schema expects {:?}",
                    t.shape(),
                    shape
                )));
            }
            Ok((*t).clone())
        };
        *store.get_mut(id) = restore(&name)?;
        opt.m[id] = restore(&format!("optim.m.{name}"))?;
        opt.v[id] = restore(&format!("optim.v.{name}"))?;
    }
    // train_step is the only thing that advances either counter, so the
    // Adam timestep always equals the step counter.
    opt.t = data.step;
    Ok(TrainState {
        store,
        ids,
        opt,
        step: data.step,
        run,
    })
}

/// Verify analytic gradients of the total pretraining loss against central
/// finite differences at 64-bit, on a fixed batch with a fixed mask plan.
pub fn grad_check_total_loss(
    model: &ModelConfig,
    batch: &[&ShotSequenceSample],
    toggles: &LossToggles,
    tau: f64,
    init_seed: u64,
    cfg: &crate::numerics::GradCheckConfig,
) -> Result<crate::numerics::GradCheckReport> {
    let (store32, ids) = ModelIds::init::<f32>(model, init_seed)?;
    let store = store32.cast::<f64>();
    let klens: Vec<usize> = batch.iter().map(|s| s.k()).collect();
    let slens: Vec<usize> = batch.iter().map(|s| s.s()).collect();
    let plan = MaskPlan::build(0.2, &klens, &klens, &slens, child_seed(init_seed, "gradcheck-mask"))?;
    let params: Vec<Tensor<f64>> = store.entries().iter().map(|e| e.tensor.clone()).collect();
    let report = crate::numerics::grad_check(
        &params,
        |tape, vars| {
            let enc = encode_batch(tape, vars, &ids, model, batch, Some(&plan))?;
            Ok(total_loss(tape, &enc, batch, toggles, tau)?.total)
        },
        cfg,
    )?;
    Ok(report)
}

/// In-batch video-to-audio top-1 retrieval accuracy, evaluated without
/// masking over `n_batches` deterministic evaluation batches. Chance level
/// is `1 / (batch_size * k)`.
pub fn eval_inbatch_v2a(
    state: &TrainState,
    windows: &[ShotSequenceSample],
    n_batches: usize,
) -> Result<f64> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut rng = rng_from(child_seed(state.run.train.seed, "eval"));
    order.shuffle(&mut rng);
    let batch_size = state.run.train.batch_size;
    let mut hits = 0usize;
    let mut total = 0usize;
    for b in 0..n_batches {
        let batch: Vec<&ShotSequenceSample> = (0..batch_size)
            .map(|j| &windows[order[(b * batch_size + j) % windows.len()]])
            .collect();
        let mut tape = Tape::new();
        let vars = state.store.inject(&mut tape);
        let enc = encode_batch(&mut tape, &vars, &state.ids, &state.run.model, &batch, None)?;
        let v = tape.value(enc.v_ctx);
        let a = tape.value(enc.a_ctx);
        let m = v.rows();
        for i in 0..m {
            let vi = v.row(i);
            let vn = norm(vi);
            let mut best = 0usize;
            let mut best_sim = f64::NEG_INFINITY;
            for j in 0..m {
                let aj = a.row(j);
                let sim = dot64(vi, aj) / (vn * norm(aj)).max(1e-30);
                if sim > best_sim {
                    best_sim = sim;
                    best = j;
                }
            }
            if best == i {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

fn norm(a: &[f32]) -> f64 {
    dot64(a, a).sqrt()
}
