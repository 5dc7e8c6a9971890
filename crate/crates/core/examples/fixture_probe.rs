use lrmm_core::corpus::{generate, sample_windows, CorpusManifest, ShotSequenceSample};
use lrmm_core::frontend::ModelConfig;
use lrmm_core::probes::*;
use lrmm_core::trainer::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let sigma: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let movies: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(60);
    let t_all = std::time::Instant::now();

    let manifest = |rho: f64| CorpusManifest {
        n_movies: movies, shots_per_movie: 40,
        d_v: 64, d_a: 48, d_l: 32, latent_dim: 16,
        seed: 11, sigma, rho, n_classes: 4,
        ..Default::default()
    };
    let run = RunConfig {
        train: TrainConfig { steps, batch_size: 32, k: 10, seed: 5, checkpoint_every: 0, ..Default::default() },
        model: ModelConfig { d_v: 64, d_a: 48, d_l: 32, d: 64, n_heads: 4, n_layers: 3, k_max: 16, s_max: 64, ln_eps: 1e-5 },
    };

    let train_on = |rho: f64| -> (TrainState, Vec<ShotSequenceSample>, Vec<f64>) {
        let corpus = generate(&manifest(rho)).unwrap();
        let windows = sample_windows(&corpus, 10, 10, 5).unwrap();
        let mut state = TrainState::init(run.clone()).unwrap();
        let mut totals = Vec::new();
        train_loop(&mut state, &windows, |_, _, b| { totals.push(b.total); Ok(()) }).unwrap();
        (state, windows, totals)
    };

    println!("=== rho=0.9, sigma={sigma}, steps={steps}, movies={movies} ===");
    let (state9, windows9, totals9) = train_on(0.9);
    let early: f64 = totals9[..10].iter().sum::<f64>() / 10.0;
    let last = *totals9.last().unwrap();
    println!("early avg {:.3}, final {:.3}, ratio {:.3}", early, last, last / early);
    let acc9 = eval_inbatch_v2a(&state9, &windows9, 5).unwrap();
    println!("inbatch v2a acc: {:.4} (chance {:.5}, 5x = {:.5})", acc9, 1.0/320.0, 5.0/320.0);

    println!("=== rho=0.0 ===");
    let (state0, windows0, _totals0) = train_on(0.0);
    let acc0 = eval_inbatch_v2a(&state0, &windows0, 5).unwrap();
    println!("inbatch v2a acc (train windows): {:.4} (2x chance = {:.5})", acc0, 2.0/320.0);
    // held-out: same distribution, different movies
    let mut held_manifest = manifest(0.0);
    held_manifest.seed = 1234;
    let held = generate(&held_manifest).unwrap();
    let held_windows = sample_windows(&held, 10, 10, 5).unwrap();
    let acc0h = eval_inbatch_v2a(&state0, &held_windows, 5).unwrap();
    println!("inbatch v2a acc (held-out windows): {:.4}", acc0h);
    // and the rho=0.9 model on held-out rho=0.9 windows
    let mut held9m = manifest(0.9);
    held9m.seed = 1234;
    let held9 = generate(&held9m).unwrap();
    let held9_windows = sample_windows(&held9, 10, 10, 5).unwrap();
    let acc9h = eval_inbatch_v2a(&state9, &held9_windows, 5).unwrap();
    println!("rho=0.9 held-out v2a acc: {:.4}", acc9h);

    // criterion 9 directional: class probe with v-base vs v-context on rho=0.9
    let corpus9 = generate(&manifest(0.9)).unwrap();
    let refs: Vec<&ShotSequenceSample> = windows9.iter().collect();
    for spec_name in ["v-base", "v-context"] {
        let spec = FeatureSpec::parse(spec_name).unwrap();
        let encs = encode_samples(&state9.store, &state9.ids, &state9.run.model, &refs).unwrap();
        let mut accs = Vec::new();
        for seed in 0..3u64 {
            let ds = ProbeDataset {
                features: encs.iter().map(|e| feature_vector(e, &spec)).collect(),
                targets: ProbeTargets::Classes(refs.iter().map(|s| s.labels.class_id).collect(), corpus9.manifest.n_classes),
                movie_ids: refs.iter().map(|s| s.movie_id.clone()).collect(),
            };
            accs.push(linear_probe(&ds, seed).unwrap().metric.value());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("class probe {spec_name}: mean acc {:.4} {:?}", mean, accs);
    }
    println!("total wall: {:?}", t_all.elapsed());
}
// appended: held-out evaluation hook (fresh corpus seed) for the null test
