//! Ablation harness: the loss-toggle matrix and the sequence-length sweep,
//! each producing comparable rows (final losses plus in-batch video-to-audio
//! retrieval accuracy against chance).

use serde::Serialize;

use crate::corpus::{sample_windows, Corpus};
use crate::objectives::LossToggles;
use crate::trainer::{eval_inbatch_v2a, train_loop, Result, RunConfig, TrainState};

#[derive(Clone, Debug, Serialize)]
pub struct AblateRow {
    pub name: String,
    pub toggles: LossToggles,
    pub k: usize,
    pub steps: usize,
    pub final_total: f64,
    pub final_intra: f64,
    pub final_inter: f64,
    pub final_cross: f64,
    /// In-batch video-to-audio top-1 accuracy after training.
    pub inbatch_v2a: f64,
    /// Chance level for that accuracy, `1 / (batch * k)`.
    pub chance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblateReport {
    pub rows: Vec<AblateRow>,
}

impl AblateReport {
    /// Plain text table for stdout.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:>3} {:>6} {:>10} {:>10} {:>10} {:>10} {:>9} {:>9}\n",
            "run", "k", "steps", "total", "intra", "inter", "cross", "v2a-acc", "chance"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<10} {:>3} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>9.4} {:>9.5}\n",
                r.name,
                r.k,
                r.steps,
                r.final_total,
                r.final_intra,
                r.final_inter,
                r.final_cross,
                r.inbatch_v2a,
                r.chance
            ));
        }
        out
    }
}

const EVAL_BATCHES: usize = 4;

fn run_one(corpus: &Corpus, run: RunConfig, name: &str) -> Result<AblateRow> {
    let windows = sample_windows(corpus, run.train.k, run.train.stride(), run.train.seed)?;
    let mut state = TrainState::init(run)?;
    let mut last = None;
    train_loop(&mut state, &windows, |_, _, b| {
        last = Some(b.clone());
        Ok(())
    })?;
    let acc = eval_inbatch_v2a(&state, &windows, EVAL_BATCHES)?;
    let b = last.expect("at least one step");
    Ok(AblateRow {
        name: name.to_string(),
        toggles: state.run.train.toggles,
        k: state.run.train.k,
        steps: state.run.train.steps,
        final_total: b.total,
        final_intra: b.intra,
        final_inter: b.inter,
        final_cross: b.cross,
        inbatch_v2a: acc,
        chance: 1.0 / (state.run.train.batch_size * state.run.train.k) as f64,
    })
}

/// The four-row loss matrix: full, no-intra, no-inter, no-cross. Each run
/// starts from the same initialization (same seed).
pub fn run_toggle_matrix(corpus: &Corpus, base: RunConfig) -> Result<AblateReport> {
    let configs = [
        (true, true, true),
        (false, true, true),
        (true, false, true),
        (true, true, false),
    ];
    let mut rows = Vec::new();
    for (intra, inter, cross) in configs {
        let mut run = base.clone();
        run.train.toggles = LossToggles {
            intra,
            inter,
            cross,
        };
        let name = run.train.toggles.label();
        log::info!("ablation run: {name}");
        rows.push(run_one(corpus, run, &name)?);
    }
    Ok(AblateReport { rows })
}

/// Sequence-length sweep with all losses on.
pub fn run_k_sweep(corpus: &Corpus, base: RunConfig, ks: &[usize]) -> Result<AblateReport> {
    let mut rows = Vec::new();
    for &k in ks {
        let mut run = base.clone();
        run.train.k = k;
        run.train.stride = Some(k);
        let name = format!("k={k}");
        log::info!("sequence-length run: {name}");
        rows.push(run_one(corpus, run, &name)?);
    }
    Ok(AblateReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, CorpusManifest};
    use crate::frontend::ModelConfig;
    use crate::trainer::TrainConfig;

    #[test]
    fn toggle_matrix_disables_terms_and_reports_rows() {
        let corpus = generate(&CorpusManifest {
            n_movies: 4,
            shots_per_movie: 12,
            d_v: 6,
            d_a: 5,
            d_l: 4,
            latent_dim: 4,
            seed: 2,
            sigma: 1.0,
            rho: 0.8,
            n_classes: 2,
            ..Default::default()
        })
        .unwrap();
        let base = RunConfig {
            train: TrainConfig {
                steps: 2,
                batch_size: 4,
                k: 3,
                seed: 5,
                checkpoint_every: 0,
                ..Default::default()
            },
            model: ModelConfig {
                d_v: 6,
                d_a: 5,
                d_l: 4,
                d: 8,
                n_heads: 2,
                n_layers: 1,
                k_max: 8,
                s_max: 40,
                ln_eps: 1e-5,
            },
        };
        let report = run_toggle_matrix(&corpus, base).unwrap();
        assert_eq!(report.rows.len(), 4);
        assert_eq!(report.rows[0].name, "full");
        let no_intra = &report.rows[1];
        assert_eq!(no_intra.final_intra, 0.0);
        assert!(no_intra.final_inter > 0.0);
        let no_inter = &report.rows[2];
        assert_eq!(no_inter.final_inter, 0.0);
        let no_cross = &report.rows[3];
        assert_eq!(no_cross.final_cross, 0.0);
        // disabled terms contribute nothing to the totals
        for r in &report.rows {
            let sum = r.final_intra + r.final_inter + r.final_cross;
            assert!((r.final_total - sum).abs() < 1e-9);
        }
        let table = report.render_table();
        assert!(table.contains("no-inter"));
    }
}
