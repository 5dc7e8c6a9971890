//! Subcommand implementations. Every command prints its resolved
//! configuration before doing any work; every `--seed` invocation is fully
//! reproducible.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use lrmm_core::ablate::{run_k_sweep, run_toggle_matrix, AblateReport};
use lrmm_core::corpus::{
    class_centroids, generate_corpus, nearest_centroid, read_corpus, sample_windows, Corpus,
    CorpusManifest, ShotSequenceSample,
};
use lrmm_core::frontend::ModelConfig;
use lrmm_core::numerics::GradCheckConfig;
use lrmm_core::objectives::LossToggles;
use lrmm_core::params::ModuleGroup;
use lrmm_core::probes::{
    encode_samples, feature_vector, linear_probe, nss_task, per_shot_rows, retrieval_eval,
    sso_task, FeatureSpec, NssScorer, ProbeDataset, ProbeMetric, ProbeTargets, TaskFeatures,
};
use lrmm_core::trainer::{load_checkpoint, RunConfig, TrainConfig, TrainState};

fn announce<T: Serialize>(what: &str, cfg: &T) {
    println!(
        "resolved {what} config:\n{}",
        serde_json::to_string_pretty(cfg).expect("serializable config")
    );
}

fn read_json_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

// ---------------------------------------------------------------- gen-corpus

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    /// Number of movies.
    #[arg(long, default_value_t = 50)]
    movies: usize,
    /// Shots per movie.
    #[arg(long, default_value_t = 200)]
    shots: usize,
    /// Cross-modal signal strength in [0, 1].
    #[arg(long, default_value_t = 0.9)]
    rho: f64,
    /// Noise level.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    d_v: usize,
    #[arg(long, default_value_t = 48)]
    d_a: usize,
    #[arg(long, default_value_t = 32)]
    d_l: usize,
    #[arg(long, default_value_t = 16)]
    latent_dim: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Allow shots with zero language tokens.
    #[arg(long)]
    allow_empty_spans: bool,
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
}

pub fn gen_corpus(args: GenCorpusArgs) -> Result<ExitCode> {
    let manifest = CorpusManifest {
        n_movies: args.movies,
        shots_per_movie: args.shots,
        d_v: args.d_v,
        d_a: args.d_a,
        d_l: args.d_l,
        latent_dim: args.latent_dim,
        seed: args.seed,
        sigma: args.sigma,
        rho: args.rho,
        n_classes: args.classes,
        allow_empty_spans: args.allow_empty_spans,
        version: lrmm_core::corpus::FORMAT_VERSION,
    };
    announce("gen-corpus", &manifest);
    let corpus = generate_corpus(&manifest, &args.out)?;
    let shots: usize = corpus.movies.iter().map(|m| m.shots.len()).sum();
    println!(
        "wrote {} movies / {} shots to {}",
        corpus.movies.len(),
        shots,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

// ------------------------------------------------------------------ pretrain

/// Hyperparameter overrides shared by the CLI flags and the optional JSON
/// config file (flat kebab-case keys); flags win over the file.
#[derive(Args, Deserialize, Serialize, Debug, Default, Clone)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct TrainOverrides {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// Shared model width.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    s_max: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    mask_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Enabled losses, comma-separated subset of intra,inter,cross.
    #[arg(long)]
    losses: Option<String>,
    /// Trainable module groups, comma-separated subset of
    /// video,audio,language,cross_modal.
    #[arg(long)]
    train_modules: Option<String>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Disable gradient clipping entirely.
    #[arg(long)]
    #[serde(default)]
    no_clip: bool,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

impl TrainOverrides {
    /// Flags win over the file config.
    fn on_top_of(self, file: TrainOverrides) -> TrainOverrides {
        TrainOverrides {
            steps: self.steps.or(file.steps),
            batch_size: self.batch_size.or(file.batch_size),
            k: self.k.or(file.k),
            stride: self.stride.or(file.stride),
            d: self.d.or(file.d),
            heads: self.heads.or(file.heads),
            layers: self.layers.or(file.layers),
            k_max: self.k_max.or(file.k_max),
            s_max: self.s_max.or(file.s_max),
            lr_max: self.lr_max.or(file.lr_max),
            lr_min: self.lr_min.or(file.lr_min),
            weight_decay: self.weight_decay.or(file.weight_decay),
            tau: self.tau.or(file.tau),
            mask_rate: self.mask_rate.or(file.mask_rate),
            seed: self.seed.or(file.seed),
            losses: self.losses.or(file.losses),
            train_modules: self.train_modules.or(file.train_modules),
            clip_norm: self.clip_norm.or(file.clip_norm),
            no_clip: self.no_clip || file.no_clip,
            checkpoint_every: self.checkpoint_every.or(file.checkpoint_every),
        }
    }

    fn into_run_config(self, manifest: &CorpusManifest) -> Result<RunConfig> {
        let mut train = TrainConfig::default();
        let model_defaults = ModelConfig::default();
        if let Some(v) = self.steps {
            train.steps = v;
        }
        if let Some(v) = self.batch_size {
            train.batch_size = v;
        }
        if let Some(v) = self.k {
            train.k = v;
        }
        train.stride = self.stride;
        if let Some(v) = self.lr_max {
            train.lr_max = v;
        }
        if let Some(v) = self.lr_min {
            train.lr_min = v;
        }
        if let Some(v) = self.weight_decay {
            train.adam.weight_decay = v;
        }
        if let Some(v) = self.tau {
            train.tau = v;
        }
        if let Some(v) = self.mask_rate {
            train.mask_rate = v;
        }
        if let Some(v) = self.seed {
            train.seed = v;
        }
        if let Some(losses) = &self.losses {
            train.toggles = parse_losses(losses)?;
        }
        if let Some(modules) = &self.train_modules {
            train.trainable = parse_modules(modules)?;
        }
        if self.no_clip {
            train.clip_norm = None;
        } else if let Some(v) = self.clip_norm {
            train.clip_norm = Some(v);
        }
        if let Some(v) = self.checkpoint_every {
            train.checkpoint_every = v;
        }
        let model = ModelConfig {
            d_v: manifest.d_v,
            d_a: manifest.d_a,
            d_l: manifest.d_l,
            d: self.d.unwrap_or(model_defaults.d),
            n_heads: self.heads.unwrap_or(model_defaults.n_heads),
            n_layers: self.layers.unwrap_or(model_defaults.n_layers),
            k_max: self.k_max.unwrap_or(model_defaults.k_max),
            s_max: self.s_max.unwrap_or(model_defaults.s_max),
            ln_eps: model_defaults.ln_eps,
        };
        Ok(RunConfig { train, model })
    }
}

fn parse_losses(spec: &str) -> Result<LossToggles> {
    let mut toggles = LossToggles {
        intra: false,
        inter: false,
        cross: false,
    };
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "intra" => toggles.intra = true,
            "inter" => toggles.inter = true,
            "cross" => toggles.cross = true,
            other => bail!("unknown loss '{other}' (expected intra|inter|cross)"),
        }
    }
    Ok(toggles)
}

fn parse_modules(spec: &str) -> Result<Vec<ModuleGroup>> {
    spec.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<ModuleGroup>().map_err(anyhow::Error::msg))
        .collect()
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Corpus JSONL produced by gen-corpus.
    #[arg(long)]
    corpus: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics JSONL path (default: checkpoint path + .metrics.jsonl).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Optional JSON config file; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

pub fn pretrain_run_config(args: &PretrainArgs, corpus: &Corpus) -> Result<RunConfig> {
    let from_file: TrainOverrides = match &args.config {
        Some(path) => read_json_file(path)?,
        None => TrainOverrides::default(),
    };
    args.overrides
        .clone()
        .on_top_of(from_file)
        .into_run_config(&corpus.manifest)
}

pub fn pretrain(args: PretrainArgs) -> Result<ExitCode> {
    let corpus = read_corpus(&args.corpus)?;
    let run = pretrain_run_config(&args, &corpus)?;
    announce("pretrain", &run);
    let metrics = args
        .metrics
        .clone()
        .unwrap_or_else(|| args.out.with_extension("metrics.jsonl"));
    let artifacts = lrmm_core::trainer::pretrain(&corpus, run, &args.out, &metrics)?;
    println!("parameters: {}", artifacts.n_parameters);
    if let Some(b) = &artifacts.final_loss {
        println!(
            "final losses: total {:.4} (intra {:.4}, inter {:.4}, cross {:.4})",
            b.total, b.intra, b.inter, b.cross
        );
    }
    println!("checkpoint: {}", artifacts.checkpoint.display());
    println!("metrics: {}", artifacts.metrics.display());
    Ok(ExitCode::SUCCESS)
}

// -------------------------------------------------------------------- encode

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated feature list, e.g. v-context,a-context,va-cross.
    #[arg(long, default_value = "v-context,a-context,va-cross")]
    features: String,
    /// Window length (default: the checkpoint's training k).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct FeatureLine<'a> {
    sample_id: String,
    spec: &'a str,
    vector: Vec<f32>,
}

fn window_id(s: &ShotSequenceSample) -> String {
    format!("{}:{}", s.movie_id, s.shot_ids[0])
}

pub fn encode(args: EncodeArgs) -> Result<ExitCode> {
    let state = load_checkpoint(&args.ckpt)?;
    let corpus = read_corpus(&args.corpus)?;
    let spec = FeatureSpec::parse(&args.features)?;
    let k = args.k.unwrap_or(state.run.train.k);
    let stride = args.stride.unwrap_or(k);
    #[derive(Serialize)]
    struct Resolved<'a> {
        ckpt: String,
        features: &'a str,
        k: usize,
        stride: usize,
        seed: u64,
    }
    announce(
        "encode",
        &Resolved {
            ckpt: args.ckpt.display().to_string(),
            features: &args.features,
            k,
            stride,
            seed: args.seed,
        },
    );
    check_dims(&state, &corpus)?;
    let windows = sample_windows(&corpus, k, stride, args.seed)?;
    let refs: Vec<&ShotSequenceSample> = windows.iter().collect();
    let encodings = encode_samples(&state.store, &state.ids, &state.run.model, &refs)?;
    let file = std::fs::File::create(&args.out)?;
    let mut w = std::io::BufWriter::new(file);
    use std::io::Write;
    let spec_str = spec.to_string_spec();
    for (sample, enc) in refs.iter().zip(&encodings) {
        let line = FeatureLine {
            sample_id: window_id(sample),
            spec: &spec_str,
            vector: feature_vector(enc, &spec),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    println!("wrote {} feature vectors to {}", refs.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn check_dims(state: &TrainState, corpus: &Corpus) -> Result<()> {
    let m = &corpus.manifest;
    let c = &state.run.model;
    if (m.d_v, m.d_a, m.d_l) != (c.d_v, c.d_a, c.d_l) {
        bail!(
            "corpus dims ({}, {}, {}) do not match checkpoint model ({}, {}, {})",
            m.d_v,
            m.d_a,
            m.d_l,
            c.d_v,
            c.d_a,
            c.d_l
        );
    }
    Ok(())
}

// --------------------------------------------------------------------- probe

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeTask {
    /// Movie class from time-averaged window features.
    Class,
    /// Engagement regression from time-averaged window features.
    Engagement,
    /// Per-shot class from per-position features (no time averaging).
    ShotClass,
    /// Shot-sequence ordering (6-way, 3 shots).
    Sso,
    /// Next-shot selection (5 candidates after 4 context shots).
    Nss,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerArg {
    Cosine,
    Bilinear,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    /// Checkpoint (not needed with --random-features).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum)]
    task: ProbeTask,
    #[arg(long, default_value = "v-context,a-context")]
    features: String,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use seeded random vectors instead of model features (chance baseline).
    #[arg(long)]
    random_features: bool,
    #[arg(long, default_value_t = 64)]
    random_dim: usize,
    #[arg(long, value_enum, default_value_t = ScorerArg::Cosine)]
    nss_scorer: ScorerArg,
    /// Optional JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ProbeReport<'a> {
    task: &'a str,
    config: serde_json::Value,
    metrics: serde_json::Value,
}

fn write_report(out: &Option<PathBuf>, report: &ProbeReport<'_>) -> Result<()> {
    if let Some(path) = out {
        std::fs::write(path, serde_json::to_string_pretty(report)?)?;
        println!("report: {}", path.display());
    }
    Ok(())
}

pub fn probe(args: ProbeArgs) -> Result<ExitCode> {
    let corpus = read_corpus(&args.corpus)?;
    let spec = FeatureSpec::parse(&args.features)?;
    let state = match (&args.ckpt, args.random_features) {
        (Some(path), false) => Some(load_checkpoint(path)?),
        (None, true) => None,
        (Some(_), true) => bail!("--ckpt and --random-features are mutually exclusive"),
        (None, false) => bail!("either --ckpt or --random-features is required"),
    };
    if let Some(s) = &state {
        check_dims(s, &corpus)?;
    }
    let task_name = match args.task {
        ProbeTask::Class => "class",
        ProbeTask::Engagement => "engagement",
        ProbeTask::ShotClass => "shot-class",
        ProbeTask::Sso => "sso",
        ProbeTask::Nss => "nss",
    };
    let config = serde_json::json!({
        "task": task_name,
        "features": args.features,
        "k": args.k,
        "seed": args.seed,
        "random_features": args.random_features,
        "nss_scorer": args.nss_scorer,
        "corpus": args.corpus.display().to_string(),
    });
    announce("probe", &config);

    let task_features = |dim: usize| -> TaskFeatures<'_> {
        match &state {
            None => TaskFeatures::Random { dim },
            Some(s) => TaskFeatures::Model {
                store: &s.store,
                ids: &s.ids,
                cfg: &s.run.model,
                spec: &spec,
            },
        }
    };

    let metrics = match args.task {
        ProbeTask::Sso => {
            let out = sso_task(&corpus, task_features(args.random_dim), args.seed)?;
            println!(
                "sso accuracy: {:.4} over {} held-out windows (chance {:.4})",
                out.accuracy, out.n_eval, out.chance
            );
            serde_json::json!({"accuracy": out.accuracy, "n_eval": out.n_eval, "chance": out.chance})
        }
        ProbeTask::Nss => {
            let scorer = match args.nss_scorer {
                ScorerArg::Cosine => NssScorer::Cosine,
                ScorerArg::Bilinear => NssScorer::Bilinear,
            };
            let out = nss_task(&corpus, task_features(args.random_dim), scorer, args.seed)?;
            println!(
                "nss accuracy: {:.4} over {} windows (chance {:.4})",
                out.accuracy, out.n_eval, out.chance
            );
            serde_json::json!({"accuracy": out.accuracy, "n_eval": out.n_eval, "chance": out.chance})
        }
        ProbeTask::Class | ProbeTask::Engagement | ProbeTask::ShotClass => {
            let k = args
                .k
                .or_else(|| state.as_ref().map(|s| s.run.train.k))
                .unwrap_or(10);
            let windows = sample_windows(&corpus, k, k, args.seed)?;
            let refs: Vec<&ShotSequenceSample> = windows.iter().collect();
            let dataset = build_probe_dataset(
                &corpus, &refs, &state, &spec, args.task, args.seed, args.random_dim,
            )?;
            let outcome = linear_probe(&dataset, args.seed)?;
            let (name, value) = match outcome.metric {
                ProbeMetric::Accuracy(v) => ("accuracy", v),
                ProbeMetric::Mse(v) => ("mse", v),
            };
            println!(
                "{task_name} {name}: {value:.4} ({} train / {} test rows, {} probe iterations)",
                outcome.n_train, outcome.n_test, outcome.iterations
            );
            serde_json::json!({
                name: value,
                "train_metric": outcome.train_metric.value(),
                "n_train": outcome.n_train,
                "n_test": outcome.n_test,
                "iterations": outcome.iterations,
            })
        }
    };
    write_report(
        &args.out,
        &ProbeReport {
            task: task_name,
            config,
            metrics,
        },
    )?;
    Ok(ExitCode::SUCCESS)
}

fn build_probe_dataset(
    corpus: &Corpus,
    refs: &[&ShotSequenceSample],
    state: &Option<TrainState>,
    spec: &FeatureSpec,
    task: ProbeTask,
    seed: u64,
    random_dim: usize,
) -> Result<ProbeDataset> {
    use lrmm_core::rng::{child_seed_n, rng_from};
    use rand::Rng;
    let per_window_features: Vec<Vec<Vec<f32>>> = match state {
        Some(s) => {
            let encs = encode_samples(&s.store, &s.ids, &s.run.model, refs)?;
            encs.iter()
                .map(|e| match task {
                    ProbeTask::ShotClass => per_shot_rows(e, spec),
                    _ => vec![feature_vector(e, spec)],
                })
                .collect()
        }
        None => refs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let rows = match task {
                    ProbeTask::ShotClass => s.k(),
                    _ => 1,
                };
                (0..rows)
                    .map(|r| {
                        let mut rng =
                            rng_from(child_seed_n(seed, "probe-random", (i * 1000 + r) as u64));
                        (0..random_dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
                    })
                    .collect()
            })
            .collect(),
    };
    let mut features = Vec::new();
    let mut movie_ids = Vec::new();
    match task {
        ProbeTask::Class => {
            let mut ys = Vec::new();
            for (s, rows) in refs.iter().zip(per_window_features) {
                features.extend(rows);
                movie_ids.push(s.movie_id.clone());
                ys.push(s.labels.class_id);
            }
            Ok(ProbeDataset {
                features,
                targets: ProbeTargets::Classes(ys, corpus.manifest.n_classes),
                movie_ids,
            })
        }
        ProbeTask::Engagement => {
            let mut ys = Vec::new();
            for (s, rows) in refs.iter().zip(per_window_features) {
                features.extend(rows);
                movie_ids.push(s.movie_id.clone());
                ys.push(f64::from(s.labels.engagement));
            }
            Ok(ProbeDataset {
                features,
                targets: ProbeTargets::Reals(ys),
                movie_ids,
            })
        }
        ProbeTask::ShotClass => {
            // per-shot oracle labels: nearest class centroid of each shot's
            // latent state
            let centroids = class_centroids(&corpus.manifest);
            let mut ys = Vec::new();
            for (s, rows) in refs.iter().zip(per_window_features) {
                for (i, row) in rows.into_iter().enumerate() {
                    features.push(row);
                    movie_ids.push(s.movie_id.clone());
                    let z: Vec<f64> = s.labels.latent_states[i]
                        .iter()
                        .map(|&x| f64::from(x))
                        .collect();
                    ys.push(nearest_centroid(&z, &centroids));
                }
            }
            Ok(ProbeDataset {
                features,
                targets: ProbeTargets::Classes(ys, corpus.manifest.n_classes),
                movie_ids,
            })
        }
        ProbeTask::Sso | ProbeTask::Nss => unreachable!("handled by task runners"),
    }
}

// ------------------------------------------------------------------ retrieve

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Candidate pool size.
    #[arg(long, default_value_t = 2000)]
    pool: usize,
    /// Comma-separated recall cutoffs.
    #[arg(long, default_value = "1,5,10")]
    ks: String,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn retrieve(args: RetrieveArgs) -> Result<ExitCode> {
    let state = load_checkpoint(&args.ckpt)?;
    let corpus = read_corpus(&args.corpus)?;
    check_dims(&state, &corpus)?;
    let k = args.k.unwrap_or(state.run.train.k);
    let ks: Vec<usize> = args
        .ks
        .split(',')
        .map(|p| p.trim().parse::<usize>().context("parsing --ks"))
        .collect::<Result<_>>()?;
    let config = serde_json::json!({
        "pool": args.pool, "ks": ks, "k": k, "seed": args.seed,
        "ckpt": args.ckpt.display().to_string(),
    });
    announce("retrieve", &config);
    let windows = sample_windows(&corpus, k, k, args.seed)?;
    if windows.len() < args.pool {
        bail!(
            "corpus yields {} windows, fewer than the pool of {}",
            windows.len(),
            args.pool
        );
    }
    let refs: Vec<&ShotSequenceSample> = windows.iter().take(args.pool).collect();
    let encs = encode_samples(&state.store, &state.ids, &state.run.model, &refs)?;
    let v_spec = FeatureSpec::parse("v-context")?;
    let a_spec = FeatureSpec::parse("a-context")?;
    let video: Vec<Vec<f32>> = encs.iter().map(|e| feature_vector(e, &v_spec)).collect();
    let audio: Vec<Vec<f32>> = encs.iter().map(|e| feature_vector(e, &a_spec)).collect();
    let pairing: Vec<usize> = (0..refs.len()).collect();
    let v2a = retrieval_eval(&video, &audio, &pairing, &ks)?;
    let a2v = retrieval_eval(&audio, &video, &pairing, &ks)?;
    for (name, rep) in [("video->audio", &v2a), ("audio->video", &a2v)] {
        let recalls: Vec<String> = rep
            .recall_at
            .iter()
            .map(|(kk, r)| format!("R@{kk} {:.4}", r))
            .collect();
        println!(
            "{name}: median rank {:.1}, mean rank {:.1}, {} (pool {})",
            rep.median_rank,
            rep.mean_rank,
            recalls.join(", "),
            rep.pool_size
        );
    }
    if let Some(path) = &args.out {
        let report = serde_json::json!({
            "task": "retrieval", "config": config,
            "video_to_audio": v2a, "audio_to_video": a2v,
        });
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
        println!("report: {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

// -------------------------------------------------------------------- ablate

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Run the loss-toggle matrix (default: both matrix and sweep).
    #[arg(long)]
    matrix: bool,
    /// Run the sequence-length sweep with these k values.
    #[arg(long)]
    k_sweep: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Optional JSON config file; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

pub fn ablate(args: AblateArgs) -> Result<ExitCode> {
    let corpus = read_corpus(&args.corpus)?;
    let from_file: TrainOverrides = match &args.config {
        Some(path) => read_json_file(path)?,
        None => TrainOverrides::default(),
    };
    let merged = args.overrides.clone().on_top_of(from_file);
    let mut base = merged.into_run_config(&corpus.manifest)?;
    // desk-scale sweep defaults unless configured otherwise
    if args.overrides.steps.is_none() && args.config.is_none() {
        base.train.steps = 300;
    }
    announce("ablate", &base);

    let run_matrix = args.matrix || args.k_sweep.is_none() && !args.matrix;
    let sweep_ks: Option<Vec<usize>> = match &args.k_sweep {
        Some(s) => Some(
            s.split(',')
                .map(|p| p.trim().parse::<usize>().context("parsing --k-sweep"))
                .collect::<Result<_>>()?,
        ),
        None if !args.matrix => Some(vec![10, 30, 60]),
        None => None,
    };

    let mut combined = AblateReport { rows: Vec::new() };
    if run_matrix {
        let report = run_toggle_matrix(&corpus, base.clone())?;
        combined.rows.extend(report.rows);
    }
    if let Some(ks) = sweep_ks {
        let report = run_k_sweep(&corpus, base.clone(), &ks)?;
        combined.rows.extend(report.rows);
    }
    print!("{}", combined.render_table());
    if let Some(path) = &args.out {
        std::fs::write(path, serde_json::to_string_pretty(&combined)?)?;
        println!("report: {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

// ------------------------------------------------------------------ gradcheck

#[derive(Args, Deserialize, Serialize, Debug, Default, Clone)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct GradcheckOverrides {
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    d_v: Option<usize>,
    #[arg(long)]
    d_a: Option<usize>,
    #[arg(long)]
    d_l: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    coords_per_tensor: Option<usize>,
}

impl GradcheckOverrides {
    fn on_top_of(self, file: GradcheckOverrides) -> GradcheckOverrides {
        GradcheckOverrides {
            batch: self.batch.or(file.batch),
            k: self.k.or(file.k),
            d: self.d.or(file.d),
            d_v: self.d_v.or(file.d_v),
            d_a: self.d_a.or(file.d_a),
            d_l: self.d_l.or(file.d_l),
            seed: self.seed.or(file.seed),
            epsilon: self.epsilon.or(file.epsilon),
            tolerance: self.tolerance.or(file.tolerance),
            coords_per_tensor: self.coords_per_tensor.or(file.coords_per_tensor),
        }
    }
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Optional JSON config file; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: GradcheckOverrides,
}

#[derive(Serialize)]
pub struct GradcheckResolved {
    batch: usize,
    k: usize,
    d: usize,
    d_v: usize,
    d_a: usize,
    d_l: usize,
    seed: u64,
    epsilon: f64,
    tolerance: f64,
    coords_per_tensor: usize,
}

pub fn gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let from_file: GradcheckOverrides = match &args.config {
        Some(path) => read_json_file(path)?,
        None => GradcheckOverrides::default(),
    };
    let o = args.overrides.clone().on_top_of(from_file);
    let r = GradcheckResolved {
        batch: o.batch.unwrap_or(2),
        k: o.k.unwrap_or(3),
        d: o.d.unwrap_or(16),
        d_v: o.d_v.unwrap_or(10),
        d_a: o.d_a.unwrap_or(8),
        d_l: o.d_l.unwrap_or(6),
        seed: o.seed.unwrap_or(0),
        epsilon: o.epsilon.unwrap_or(1e-5),
        tolerance: o.tolerance.unwrap_or(1e-4),
        coords_per_tensor: o.coords_per_tensor.unwrap_or(6),
    };
    announce("gradcheck", &r);
    let report = run_full_loss_gradcheck(&r)?;
    println!(
        "checked {} coordinates: max relative error {:.3e} (tolerance {:.1e}) -> {}",
        report.coords_checked,
        report.max_rel_err,
        report.tolerance,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

/// Gradient-check the full pretraining loss (all three families) at 64-bit
/// on a tiny synthetic batch with a fixed mask plan.
pub fn run_full_loss_gradcheck(
    r: &GradcheckResolved,
) -> Result<lrmm_core::numerics::GradCheckReport> {
    let manifest = CorpusManifest {
        n_movies: r.batch,
        shots_per_movie: r.k,
        d_v: r.d_v,
        d_a: r.d_a,
        d_l: r.d_l,
        latent_dim: 4,
        seed: r.seed,
        sigma: 1.0,
        rho: 0.8,
        n_classes: 2,
        allow_empty_spans: false,
        version: lrmm_core::corpus::FORMAT_VERSION,
    };
    let corpus = lrmm_core::corpus::generate(&manifest)?;
    let windows = sample_windows(&corpus, r.k, r.k, r.seed)?;
    let batch: Vec<&ShotSequenceSample> = windows.iter().take(r.batch).collect();
    let model = ModelConfig {
        d_v: r.d_v,
        d_a: r.d_a,
        d_l: r.d_l,
        d: r.d,
        n_heads: 4,
        n_layers: 3,
        k_max: r.k.max(4),
        s_max: 8 * r.k,
        ln_eps: 1e-5,
    };
    let cfg = GradCheckConfig {
        epsilon: r.epsilon,
        tolerance: r.tolerance,
        coords_per_tensor: r.coords_per_tensor,
        scale_floor: 1e-4,
        seed: r.seed,
    };
    let report = lrmm_core::trainer::grad_check_total_loss(
        &model,
        &batch,
        &LossToggles::default(),
        0.3,
        r.seed,
        &cfg,
    )?;
    Ok(report)
}

// -------------------------------------------------------------- inspect-ckpt

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

pub fn inspect(args: InspectArgs) -> Result<ExitCode> {
    let data = lrmm_core::checkpoint::load(&args.ckpt)?;
    println!("checkpoint: {}", args.ckpt.display());
    println!("format version: {}", lrmm_core::checkpoint::VERSION);
    println!("step: {}", data.step);
    println!("rng seed: {}", data.rng_seed);
    let config: serde_json::Value = serde_json::from_str(&data.config_json)?;
    println!("config:\n{}", serde_json::to_string_pretty(&config)?);
    println!("tensors ({}):", data.tensors.len());
    let mut total = 0usize;
    for (name, t) in &data.tensors {
        println!("  {:<40} {:>5} x {:<5}", name, t.rows(), t.cols());
        total += t.len();
    }
    println!("total scalars: {total}");
    Ok(ExitCode::SUCCESS)
}
