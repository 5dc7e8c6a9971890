//! Single-layer probes trained with deterministic full-batch gradient
//! descent (adaptive step size, no stochasticity). Splits are by movie so
//! windows of one movie never straddle train and test.

use rand::seq::SliceRandom;

use crate::rng::{child_seed, rng_from};

use super::{ProbeError, Result};

pub const GRAD_TOL: f64 = 1e-5;
pub const MAX_ITERS: usize = 5000;

#[derive(Clone, Debug)]
pub enum ProbeTargets {
    /// Class index per row plus the number of classes.
    Classes(Vec<usize>, usize),
    Reals(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct ProbeDataset {
    /// One feature row per example.
    pub features: Vec<Vec<f32>>,
    pub targets: ProbeTargets,
    /// Split key per example; examples sharing a key never straddle splits.
    pub movie_ids: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProbeMetric {
    /// Held-out top-1 accuracy.
    Accuracy(f64),
    /// Held-out mean squared error.
    Mse(f64),
}

impl ProbeMetric {
    pub fn value(&self) -> f64 {
        match self {
            ProbeMetric::Accuracy(v) | ProbeMetric::Mse(v) => *v,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub metric: ProbeMetric,
    pub train_metric: ProbeMetric,
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Linear model: weights laid out `(d + 1) x outputs`, last row is the bias.
struct LinearModel {
    w: Vec<f64>,
    d: usize,
    outputs: usize,
}

impl LinearModel {
    fn new(d: usize, outputs: usize) -> Self {
        LinearModel {
            w: vec![0.0; (d + 1) * outputs],
            d,
            outputs,
        }
    }

    fn logits(&self, x: &[f32], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.w[self.d * self.outputs + c];
        }
        for (j, &xj) in x.iter().enumerate() {
            let row = &self.w[j * self.outputs..(j + 1) * self.outputs];
            for (o, &wjc) in out.iter_mut().zip(row) {
                *o += f64::from(xj) * wjc;
            }
        }
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Loss and gradient of the probe over a set of rows.
fn loss_and_grad(
    model: &LinearModel,
    xs: &[&Vec<f32>],
    targets: &TargetsView,
    grad: &mut [f64],
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut z = vec![0.0f64; model.outputs];
    for (i, x) in xs.iter().enumerate() {
        model.logits(x, &mut z);
        match targets {
            TargetsView::Classes(ys) => {
                softmax_in_place(&mut z);
                let y = ys[i];
                loss += -(z[y].max(1e-300)).ln() / n;
                for (c, &p) in z.iter().enumerate() {
                    let delta = (p - if c == y { 1.0 } else { 0.0 }) / n;
                    for (j, &xj) in x.iter().enumerate() {
                        grad[j * model.outputs + c] += delta * f64::from(xj);
                    }
                    grad[model.d * model.outputs + c] += delta;
                }
            }
            TargetsView::Reals(ys) => {
                let r = z[0] - ys[i];
                loss += r * r / n;
                let delta = 2.0 * r / n;
                for (j, &xj) in x.iter().enumerate() {
                    grad[j * model.outputs] += delta * f64::from(xj);
                }
                grad[model.d * model.outputs] += delta;
            }
        }
    }
    loss
}

enum TargetsView {
    Classes(Vec<usize>),
    Reals(Vec<f64>),
}

/// Train a single linear layer on the train split with full-batch gradient
/// descent (step size halved on loss increase, grown on decrease) until the
/// gradient norm falls below `1e-5` or 5000 iterations, then report the
/// held-out metric.
pub fn linear_probe(dataset: &ProbeDataset, seed: u64) -> Result<ProbeOutcome> {
    let n = dataset.features.len();
    if n == 0 || dataset.movie_ids.len() != n {
        return Err(ProbeError::Invalid(
            "dataset rows and movie ids must align and be non-empty".into(),
        ));
    }
    let d = dataset.features[0].len();
    if dataset.features.iter().any(|f| f.len() != d) {
        return Err(ProbeError::Invalid("ragged feature rows".into()));
    }

    // split by movie, 80/20, seeded
    let mut movies: Vec<&String> = Vec::new();
    for id in &dataset.movie_ids {
        if !movies.contains(&id) {
            movies.push(id);
        }
    }
    if movies.len() < 2 {
        return Err(ProbeError::Invalid(
            "need at least 2 movies for a disjoint split".into(),
        ));
    }
    let mut shuffled = movies.clone();
    let mut rng = rng_from(child_seed(seed, "probe-split"));
    shuffled.shuffle(&mut rng);
    let n_train_movies = ((shuffled.len() as f64) * 0.8).round().max(1.0) as usize;
    let n_train_movies = n_train_movies.min(shuffled.len() - 1);
    let train_movies: std::collections::HashSet<&String> =
        shuffled[..n_train_movies].iter().copied().collect();

    let (mut train_idx, mut test_idx) = (Vec::new(), Vec::new());
    for (i, id) in dataset.movie_ids.iter().enumerate() {
        if train_movies.contains(id) {
            train_idx.push(i);
        } else {
            test_idx.push(i);
        }
    }

    let take = |idx: &[usize]| -> Vec<&Vec<f32>> {
        idx.iter().map(|&i| &dataset.features[i]).collect()
    };
    let train_x = take(&train_idx);
    let test_x = take(&test_idx);

    let (targets_train, targets_test, outputs) = match &dataset.targets {
        ProbeTargets::Classes(ys, n_classes) => {
            if *n_classes < 2 {
                return Err(ProbeError::Invalid("need at least 2 classes".into()));
            }
            if ys.iter().any(|&y| y >= *n_classes) {
                return Err(ProbeError::Invalid("class id out of range".into()));
            }
            let tr: Vec<usize> = train_idx.iter().map(|&i| ys[i]).collect();
            let te: Vec<usize> = test_idx.iter().map(|&i| ys[i]).collect();
            let distinct: std::collections::HashSet<usize> = tr.iter().copied().collect();
            if distinct.len() < 2 {
                return Err(ProbeError::Invalid(
                    "training split contains a single class".into(),
                ));
            }
            (
                TargetsView::Classes(tr),
                TargetsView::Classes(te),
                *n_classes,
            )
        }
        ProbeTargets::Reals(ys) => {
            let tr: Vec<f64> = train_idx.iter().map(|&i| ys[i]).collect();
            let te: Vec<f64> = test_idx.iter().map(|&i| ys[i]).collect();
            (TargetsView::Reals(tr), TargetsView::Reals(te), 1)
        }
    };

    let mut model = LinearModel::new(d, outputs);
    let mut grad = vec![0.0f64; model.w.len()];
    let mut lr = 0.5;
    let mut loss = loss_and_grad(&model, &train_x, &targets_train, &mut grad);
    let mut iterations = 0;
    let mut grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    while grad_norm > GRAD_TOL && iterations < MAX_ITERS {
        iterations += 1;
        let proposal: Vec<f64> = model
            .w
            .iter()
            .zip(&grad)
            .map(|(w, g)| w - lr * g)
            .collect();
        let trial = LinearModel {
            w: proposal,
            d,
            outputs,
        };
        let mut trial_grad = vec![0.0f64; model.w.len()];
        let trial_loss = loss_and_grad(&trial, &train_x, &targets_train, &mut trial_grad);
        if trial_loss.is_finite() && trial_loss <= loss {
            model = trial;
            loss = trial_loss;
            grad = trial_grad;
            lr *= 1.1;
            grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        } else {
            lr *= 0.5;
            if lr < 1e-12 {
                break;
            }
        }
    }

    let evaluate = |xs: &[&Vec<f32>], targets: &TargetsView| -> ProbeMetric {
        let mut z = vec![0.0f64; outputs];
        match targets {
            TargetsView::Classes(ys) => {
                let mut hits = 0usize;
                for (x, &y) in xs.iter().zip(ys.iter()) {
                    model.logits(x, &mut z);
                    let mut best = 0;
                    for (c, &v) in z.iter().enumerate() {
                        if v > z[best] {
                            best = c;
                        }
                    }
                    if best == y {
                        hits += 1;
                    }
                }
                ProbeMetric::Accuracy(hits as f64 / ys.len().max(1) as f64)
            }
            TargetsView::Reals(ys) => {
                let mut mse = 0.0;
                for (x, &y) in xs.iter().zip(ys.iter()) {
                    model.logits(x, &mut z);
                    mse += (z[0] - y) * (z[0] - y) / ys.len() as f64;
                }
                ProbeMetric::Mse(mse)
            }
        }
    };

    Ok(ProbeOutcome {
        metric: evaluate(&test_x, &targets_test),
        train_metric: evaluate(&train_x, &targets_train),
        iterations,
        final_grad_norm: grad_norm,
        n_train: train_idx.len(),
        n_test: test_idx.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(
        features: Vec<Vec<f32>>,
        targets: ProbeTargets,
        movies_per_row: Vec<usize>,
    ) -> ProbeDataset {
        ProbeDataset {
            movie_ids: movies_per_row.iter().map(|m| format!("m{m}")).collect(),
            features,
            targets,
        }
    }

    #[test]
    fn separable_two_class_problem_reaches_full_train_accuracy() {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut movies = Vec::new();
        for i in 0..40 {
            let cls = i % 2;
            let x = if cls == 0 { -1.0 } else { 1.0 };
            features.push(vec![x + 0.01 * (i as f32 % 7.0), 0.5]);
            labels.push(cls);
            movies.push(i % 10);
        }
        let out = linear_probe(
            &dataset(features, ProbeTargets::Classes(labels, 2), movies),
            3,
        )
        .unwrap();
        assert_eq!(out.train_metric, ProbeMetric::Accuracy(1.0));
        assert_eq!(out.metric, ProbeMetric::Accuracy(1.0));
    }

    #[test]
    fn random_features_sit_near_chance() {
        use rand::Rng;
        let n = 1200;
        let n_classes = 4;
        let mut accs = Vec::new();
        for seed in 0..4 {
            let mut rng = crate::rng::rng_from(88 + seed);
            let mut features = Vec::new();
            let mut labels = Vec::new();
            let mut movies = Vec::new();
            for i in 0..n {
                features.push((0..16).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
                labels.push(rng.gen_range(0..n_classes));
                movies.push(i % 60);
            }
            let out = linear_probe(
                &dataset(features, ProbeTargets::Classes(labels, n_classes), movies),
                5 + seed,
            )
            .unwrap();
            accs.push(out.metric.value());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!(
            (mean - 0.25).abs() <= 0.04,
            "random-feature accuracy {mean} not within 4 points of chance ({accs:?})"
        );
    }

    #[test]
    fn regression_recovers_linear_signal() {
        let mut features = Vec::new();
        let mut ys = Vec::new();
        let mut movies = Vec::new();
        for i in 0..60 {
            let x = (i as f64) / 10.0 - 3.0;
            features.push(vec![x as f32, 1.0]);
            ys.push(2.0 * x - 0.7);
            movies.push(i % 12);
        }
        let out = linear_probe(&dataset(features, ProbeTargets::Reals(ys), movies), 1).unwrap();
        match out.metric {
            ProbeMetric::Mse(m) => assert!(m < 1e-6, "mse {m}"),
            _ => panic!("expected mse"),
        }
    }

    #[test]
    fn single_class_training_set_is_an_error() {
        let features = vec![vec![0.0f32]; 10];
        let labels = vec![0usize; 10];
        let movies = (0..10).collect();
        assert!(linear_probe(
            &dataset(features, ProbeTargets::Classes(labels, 2), movies),
            0
        )
        .is_err());
    }

    #[test]
    fn split_is_disjoint_by_movie_and_seeded() {
        let features: Vec<Vec<f32>> = (0..30).map(|i| vec![i as f32]).collect();
        let labels: Vec<usize> = (0..30).map(|i| i % 2).collect();
        let movies: Vec<usize> = (0..30).map(|i| i % 6).collect();
        let a = linear_probe(
            &dataset(features.clone(), ProbeTargets::Classes(labels.clone(), 2), movies.clone()),
            9,
        )
        .unwrap();
        let b = linear_probe(
            &dataset(features, ProbeTargets::Classes(labels, 2), movies),
            9,
        )
        .unwrap();
        assert_eq!(a.n_train, b.n_train);
        assert_eq!(a.metric, b.metric);
        // 6 movies, 5 rows each: 80% of movies -> 5 train movies = 25 rows
        assert_eq!(a.n_train, 25);
        assert_eq!(a.n_test, 5);
    }
}
