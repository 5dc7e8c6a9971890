//! Editing-pattern probes: shot-sequence ordering (SSO) and next-shot
//! selection (NSS).
//!
//! SSO shuffles 3-shot windows by one of the six permutations and trains a
//! linear 6-way classifier on the concatenated per-shot encodings of the
//! shuffled sequence. NSS encodes the first 4 shots of a 9-shot window as
//! context and must pick the true 5th shot out of the remaining five,
//! individually encoded and shuffled.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::backbone::ModelIds;
use crate::corpus::{sample_windows, Corpus, ShotSequenceSample};
use crate::frontend::ModelConfig;
use crate::numerics::Tensor;
use crate::params::ParamStore;
use crate::rng::{child_seed, child_seed_n, rng_from};

use super::features::{encode_samples, feature_vector, per_shot_rows, FeatureSpec};
use super::linear::{linear_probe, ProbeDataset, ProbeTargets};
use super::{ProbeError, Result};

/// The six orderings of three shots, lexicographic; the label space of SSO.
pub const PERMUTATIONS_3: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

/// `out[i] = items[perm[i]]`.
pub fn apply_permutation<T: Clone>(perm: &[usize], items: &[T]) -> Vec<T> {
    perm.iter().map(|&p| items[p].clone()).collect()
}

/// The inverse ordering: applying it after `perm` restores the original.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Rebuild a window with its shots in a new order (features, tokens, spans,
/// labels all follow).
fn reorder_shots(sample: &ShotSequenceSample, order: &[usize]) -> ShotSequenceSample {
    let d_l = sample.text_tokens.cols();
    let mut video = Vec::new();
    let mut audio = Vec::new();
    let mut tokens: Vec<f32> = Vec::new();
    let mut spans = Vec::new();
    let mut latents = Vec::new();
    let mut shot_ids = Vec::new();
    let mut at = 0;
    for &src in order {
        video.extend_from_slice(sample.video_feats.row(src));
        audio.extend_from_slice(sample.audio_feats.row(src));
        let (s0, s1) = sample.spans[src];
        for t in s0..s1 {
            tokens.extend_from_slice(sample.text_tokens.row(t));
        }
        spans.push((at, at + (s1 - s0)));
        at += s1 - s0;
        latents.push(sample.labels.latent_states[src].clone());
        shot_ids.push(sample.shot_ids[src]);
    }
    let k = order.len();
    ShotSequenceSample {
        movie_id: sample.movie_id.clone(),
        shot_ids,
        video_feats: Tensor::from_vec(k, sample.video_feats.cols(), video).expect("shape"),
        audio_feats: Tensor::from_vec(k, sample.audio_feats.cols(), audio).expect("shape"),
        text_tokens: Tensor::from_vec(at, d_l, tokens).expect("shape"),
        spans,
        labels: crate::corpus::SampleLabels {
            latent_states: latents,
            ..sample.labels.clone()
        },
    }
}

/// Take `count` consecutive shots starting at `start` as a standalone window.
fn slice_window(sample: &ShotSequenceSample, start: usize, count: usize) -> ShotSequenceSample {
    reorder_shots(sample, &(start..start + count).collect::<Vec<_>>())
}

/// Where task features come from: a pretrained backbone, or seeded random
/// vectors (the chance baseline).
pub enum TaskFeatures<'a> {
    Model {
        store: &'a ParamStore<f32>,
        ids: &'a ModelIds,
        cfg: &'a ModelConfig,
        spec: &'a FeatureSpec,
    },
    Random {
        dim: usize,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct TaskOutcome {
    pub accuracy: f64,
    pub n_eval: usize,
    pub chance: f64,
}

fn random_vector(seed: u64, idx: u64, dim: usize) -> Vec<f32> {
    let mut rng = rng_from(child_seed_n(seed, "random-feature", idx));
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect()
}

/// Shot-sequence ordering: 6-way classification of the shuffle applied to a
/// 3-shot window.
pub fn sso_task(corpus: &Corpus, features: TaskFeatures<'_>, seed: u64) -> Result<TaskOutcome> {
    let windows = sample_windows(corpus, 3, 3, child_seed(seed, "sso-windows"))?;
    let mut rng = rng_from(child_seed(seed, "sso-perms"));
    let labeled: Vec<(ShotSequenceSample, usize)> = windows
        .iter()
        .map(|w| {
            let label = rng.gen_range(0..PERMUTATIONS_3.len());
            (reorder_shots(w, &PERMUTATIONS_3[label]), label)
        })
        .collect();
    let rows: Vec<Vec<f32>> = match &features {
        TaskFeatures::Random { dim } => (0..labeled.len())
            .map(|i| random_vector(child_seed(seed, "sso"), i as u64, *dim))
            .collect(),
        TaskFeatures::Model {
            store,
            ids,
            cfg,
            spec,
        } => {
            let refs: Vec<&ShotSequenceSample> = labeled.iter().map(|(w, _)| w).collect();
            let encs = encode_samples(store, ids, cfg, &refs)?;
            encs.iter()
                .map(|e| per_shot_rows(e, spec).concat())
                .collect()
        }
    };
    let dataset = ProbeDataset {
        movie_ids: labeled.iter().map(|(w, _)| w.movie_id.clone()).collect(),
        targets: ProbeTargets::Classes(
            labeled.iter().map(|(_, l)| *l).collect(),
            PERMUTATIONS_3.len(),
        ),
        features: rows,
    };
    let outcome = linear_probe(&dataset, child_seed(seed, "sso-probe"))?;
    Ok(TaskOutcome {
        accuracy: outcome.metric.value(),
        n_eval: outcome.n_test,
        chance: 1.0 / PERMUTATIONS_3.len() as f64,
    })
}

const NSS_CONTEXT: usize = 4;
const NSS_CANDIDATES: usize = 5;
const NSS_WINDOW: usize = NSS_CONTEXT + NSS_CANDIDATES;

/// How NSS scores a candidate against the context.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NssScorer {
    /// Cosine between the time-averaged context encoding and the candidate
    /// encoding; no trained parameters.
    Cosine,
    /// A trained bilinear form `context^T B candidate` fit on the train
    /// split with softmax cross-entropy.
    Bilinear,
}

struct NssInstance {
    movie_id: String,
    context: Vec<f32>,
    candidates: Vec<Vec<f32>>,
    truth: usize,
}

/// Next-shot selection over 9-shot windows: 4 context shots, 5 shuffled
/// candidates, accuracy of picking the true next shot.
pub fn nss_task(
    corpus: &Corpus,
    features: TaskFeatures<'_>,
    scorer: NssScorer,
    seed: u64,
) -> Result<TaskOutcome> {
    let windows = sample_windows(corpus, NSS_WINDOW, NSS_WINDOW, child_seed(seed, "nss-windows"))?;
    let mut rng = rng_from(child_seed(seed, "nss-shuffle"));
    let mut instances: Vec<NssInstance> = Vec::with_capacity(windows.len());
    match &features {
        TaskFeatures::Random { dim } => {
            let fseed = child_seed(seed, "nss");
            for (i, w) in windows.iter().enumerate() {
                let base = (i * (NSS_CANDIDATES + 1)) as u64;
                let context = random_vector(fseed, base, *dim);
                let mut candidates: Vec<(usize, Vec<f32>)> = (0..NSS_CANDIDATES)
                    .map(|c| (c, random_vector(fseed, base + 1 + c as u64, *dim)))
                    .collect();
                candidates.shuffle(&mut rng);
                let truth = candidates.iter().position(|(c, _)| *c == 0).expect("present");
                instances.push(NssInstance {
                    movie_id: w.movie_id.clone(),
                    context,
                    candidates: candidates.into_iter().map(|(_, v)| v).collect(),
                    truth,
                });
            }
        }
        TaskFeatures::Model {
            store,
            ids,
            cfg,
            spec,
        } => {
            // encode all contexts and candidates in one ragged pass
            let mut pieces: Vec<ShotSequenceSample> = Vec::new();
            for w in &windows {
                pieces.push(slice_window(w, 0, NSS_CONTEXT));
                for c in 0..NSS_CANDIDATES {
                    pieces.push(slice_window(w, NSS_CONTEXT + c, 1));
                }
            }
            let refs: Vec<&ShotSequenceSample> = pieces.iter().collect();
            let encs = encode_samples(store, ids, cfg, &refs)?;
            for (i, w) in windows.iter().enumerate() {
                let base = i * (NSS_CANDIDATES + 1);
                let context = feature_vector(&encs[base], spec);
                let mut candidates: Vec<(usize, Vec<f32>)> = (0..NSS_CANDIDATES)
                    .map(|c| (c, feature_vector(&encs[base + 1 + c], spec)))
                    .collect();
                candidates.shuffle(&mut rng);
                let truth = candidates.iter().position(|(c, _)| *c == 0).expect("present");
                instances.push(NssInstance {
                    movie_id: w.movie_id.clone(),
                    context,
                    candidates: candidates.into_iter().map(|(_, v)| v).collect(),
                    truth,
                });
            }
        }
    }
    let chance = 1.0 / NSS_CANDIDATES as f64;
    match scorer {
        NssScorer::Cosine => {
            let mut hits = 0usize;
            for inst in &instances {
                if cosine_argmax(&inst.context, &inst.candidates) == inst.truth {
                    hits += 1;
                }
            }
            Ok(TaskOutcome {
                accuracy: hits as f64 / instances.len() as f64,
                n_eval: instances.len(),
                chance,
            })
        }
        NssScorer::Bilinear => bilinear_nss(&instances, seed, chance),
    }
}

fn cosine_argmax(context: &[f32], candidates: &[Vec<f32>]) -> usize {
    let cn = norm(context);
    let mut best = 0usize;
    let mut best_sim = f64::NEG_INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        let sim = dot(context, c) / (cn * norm(c)).max(1e-30);
        if sim > best_sim {
            best_sim = sim;
            best = i;
        }
    }
    best
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Train `context^T B candidate` with full-batch gradient descent on the
/// train-split windows (movie-disjoint), evaluate on the held-out split.
fn bilinear_nss(instances: &[NssInstance], seed: u64, chance: f64) -> Result<TaskOutcome> {
    let mut movies: Vec<&String> = Vec::new();
    for inst in instances {
        if !movies.contains(&&inst.movie_id) {
            movies.push(&inst.movie_id);
        }
    }
    if movies.len() < 2 {
        return Err(ProbeError::Invalid(
            "need at least 2 movies for the bilinear scorer split".into(),
        ));
    }
    let mut shuffled = movies.clone();
    let mut rng = rng_from(child_seed(seed, "nss-split"));
    shuffled.shuffle(&mut rng);
    let n_train = (((shuffled.len() as f64) * 0.8).round().max(1.0) as usize).min(shuffled.len() - 1);
    let train_movies: std::collections::HashSet<&String> =
        shuffled[..n_train].iter().copied().collect();
    let (train, test): (Vec<&NssInstance>, Vec<&NssInstance>) = instances
        .iter()
        .partition(|inst| train_movies.contains(&inst.movie_id));

    let dc = instances[0].context.len();
    let dd = instances[0].candidates[0].len();
    let mut b = vec![0.0f64; dc * dd];
    let score = |b: &[f64], ctx: &[f32], cand: &[f32]| -> f64 {
        let mut s = 0.0;
        for (i, &ci) in ctx.iter().enumerate() {
            let row = &b[i * dd..(i + 1) * dd];
            let mut acc = 0.0;
            for (&w, &xj) in row.iter().zip(cand) {
                acc += w * f64::from(xj);
            }
            s += f64::from(ci) * acc;
        }
        s
    };
    let loss_grad = |b: &[f64], grad: &mut [f64]| -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let n = train.len() as f64;
        let mut loss = 0.0;
        for inst in &train {
            let mut logits: Vec<f64> = inst
                .candidates
                .iter()
                .map(|c| score(b, &inst.context, c))
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                z += *l;
            }
            for l in logits.iter_mut() {
                *l /= z;
            }
            loss += -(logits[inst.truth].max(1e-300)).ln() / n;
            for (c, &p) in logits.iter().enumerate() {
                let delta = (p - if c == inst.truth { 1.0 } else { 0.0 }) / n;
                let cand = &inst.candidates[c];
                for (i, &ci) in inst.context.iter().enumerate() {
                    let row = &mut grad[i * dd..(i + 1) * dd];
                    for (g, &xj) in row.iter_mut().zip(cand) {
                        *g += delta * f64::from(ci) * f64::from(xj);
                    }
                }
            }
        }
        loss
    };
    let mut grad = vec![0.0f64; b.len()];
    let mut lr = 0.5;
    let mut loss = loss_grad(&b, &mut grad);
    let mut iters = 0;
    while grad.iter().map(|g| g * g).sum::<f64>().sqrt() > super::linear::GRAD_TOL
        && iters < super::linear::MAX_ITERS
    {
        iters += 1;
        let trial: Vec<f64> = b.iter().zip(&grad).map(|(w, g)| w - lr * g).collect();
        let mut tg = vec![0.0f64; b.len()];
        let tl = loss_grad(&trial, &mut tg);
        if tl.is_finite() && tl <= loss {
            b = trial;
            loss = tl;
            grad = tg;
            lr *= 1.1;
        } else {
            lr *= 0.5;
            if lr < 1e-12 {
                break;
            }
        }
    }
    let mut hits = 0usize;
    for inst in &test {
        let mut best = 0usize;
        let mut best_s = f64::NEG_INFINITY;
        for (c, cand) in inst.candidates.iter().enumerate() {
            let s = score(&b, &inst.context, cand);
            if s > best_s {
                best_s = s;
                best = c;
            }
        }
        if best == inst.truth {
            hits += 1;
        }
    }
    Ok(TaskOutcome {
        accuracy: hits as f64 / test.len().max(1) as f64,
        n_eval: test.len(),
        chance,
    })
}
