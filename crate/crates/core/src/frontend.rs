//! Base-feature projection and masking.
//!
//! Corpus features are treated as frozen base-encoder outputs: they enter the
//! tape as constants. Each modality is projected to the shared width `d` by a
//! linear layer, learned positional embeddings are added, and (for training)
//! a seeded mask plan replaces a fixed fraction of positions with the
//! modality's learned MASK embedding plus that position's embedding. The
//! pre-mask projected tokens at masked positions are kept as prediction
//! targets.
//!
//! Batches are laid out as one concatenated `sum(len) x d` matrix per
//! modality with a [`Layout`] tracking per-sample row ranges, so projections
//! and feed-forward blocks run as single large matmuls.

use rand::seq::index::sample as index_sample;
use serde::{Deserialize, Serialize};

use crate::corpus::ShotSequenceSample;
use crate::numerics::{Element, NumericsError, Result, Tape, Tensor, Var};
use crate::params::{init_normal, LinearIds, ModuleGroup, ParamId, ParamStore, INIT_STD};
use crate::rng::{child_seed, child_seed_n, rng_from};

fn default_heads() -> usize {
    4
}
fn default_layers() -> usize {
    3
}
fn default_k_max() -> usize {
    64
}
fn default_s_max() -> usize {
    512
}
fn default_ln_eps() -> f64 {
    1e-5
}

/// Model dimensions; everything needed to rebuild the parameter schema.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub d_v: usize,
    pub d_a: usize,
    pub d_l: usize,
    /// Shared width all modalities are projected to.
    pub d: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_s_max")]
    pub s_max: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_v: 64,
            d_a: 48,
            d_l: 32,
            d: 256,
            n_heads: default_heads(),
            n_layers: default_layers(),
            k_max: default_k_max(),
            s_max: default_s_max(),
            ln_eps: default_ln_eps(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_v == 0 || self.d_a == 0 || self.d_l == 0 {
            return Err(NumericsError::Config("model dims must be >= 1".into()));
        }
        if self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads) {
            return Err(NumericsError::Config(format!(
                "width {} not divisible by {} heads",
                self.d, self.n_heads
            )));
        }
        if self.n_layers == 0 {
            return Err(NumericsError::Config("need at least one layer".into()));
        }
        if self.ln_eps <= 0.0 {
            return Err(NumericsError::Config("ln_eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Row ranges of each sample inside a concatenated batch matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    offsets: Vec<usize>,
}

impl Layout {
    pub fn new(lens: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(lens.len() + 1);
        let mut at = 0;
        offsets.push(0);
        for &l in lens {
            at += l;
            offsets.push(at);
        }
        Layout { offsets }
    }

    pub fn n_samples(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn start(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn len(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().expect("offsets never empty")
    }

    pub fn global(&self, sample: usize, local: usize) -> usize {
        debug_assert!(local < self.len(sample));
        self.offsets[sample] + local
    }
}

/// Projection + mask/positional embedding parameters for all modalities.
#[derive(Clone, Debug)]
pub struct FrontendIds {
    pub proj_v: LinearIds,
    pub proj_a: LinearIds,
    pub proj_l: LinearIds,
    pub mask_v: ParamId,
    pub mask_a: ParamId,
    pub mask_l: ParamId,
    pub pos_v: ParamId,
    pub pos_a: ParamId,
    pub pos_l: ParamId,
}

impl FrontendIds {
    pub fn init<E: Element>(store: &mut ParamStore<E>, seed: u64, cfg: &ModelConfig) -> Self {
        let emb = |store: &mut ParamStore<E>, name: &str, rows: usize, group| {
            store.register(name, init_normal(seed, name, rows, cfg.d, INIT_STD), group, false)
        };
        FrontendIds {
            proj_v: LinearIds::init(store, seed, "frontend.proj_v", cfg.d_v, cfg.d, ModuleGroup::Video),
            proj_a: LinearIds::init(store, seed, "frontend.proj_a", cfg.d_a, cfg.d, ModuleGroup::Audio),
            proj_l: LinearIds::init(store, seed, "frontend.proj_l", cfg.d_l, cfg.d, ModuleGroup::Language),
            mask_v: emb(store, "frontend.mask_v", 1, ModuleGroup::Video),
            mask_a: emb(store, "frontend.mask_a", 1, ModuleGroup::Audio),
            mask_l: emb(store, "frontend.mask_l", 1, ModuleGroup::Language),
            pos_v: emb(store, "frontend.pos_v", cfg.k_max, ModuleGroup::Video),
            pos_a: emb(store, "frontend.pos_a", cfg.k_max, ModuleGroup::Audio),
            pos_l: emb(store, "frontend.pos_l", cfg.s_max, ModuleGroup::Language),
        }
    }
}

/// One modality's projected batch: tokens with positional embeddings added,
/// the positional rows alone (needed to rebuild masked positions), and the
/// per-sample layout.
pub struct ModalityBatch {
    pub tokens: Var,
    pub pos: Var,
    pub layout: Layout,
}

pub struct ProjectedBatch {
    pub video: ModalityBatch,
    pub audio: ModalityBatch,
    pub text: ModalityBatch,
}

fn project_modality<E: Element>(
    tape: &mut Tape<E>,
    vars: &[Var],
    proj: &LinearIds,
    pos_table: ParamId,
    table_len: usize,
    feats: Vec<&Tensor<f32>>,
    what: &str,
) -> Result<ModalityBatch> {
    let lens: Vec<usize> = feats.iter().map(|t| t.rows()).collect();
    if let Some(&too_long) = lens.iter().find(|&&l| l > table_len) {
        return Err(NumericsError::Config(format!(
            "{what} sequence of length {too_long} exceeds positional table ({table_len})"
        )));
    }
    let layout = Layout::new(&lens);
    // Base features stay frozen: they enter as constants.
    let mut raw = Tensor::zeros(layout.total(), feats[0].cols());
    let mut at = 0;
    for f in &feats {
        for i in 0..f.rows() {
            for (dst, &src) in raw.row_mut(at).iter_mut().zip(f.row(i)) {
                *dst = E::from_f64(f64::from(src));
            }
            at += 1;
        }
    }
    let raw = tape.constant(raw);
    let projected = proj.forward(tape, vars, raw)?;
    // Positional rows: slice the table per sample length and stack.
    let mut slices = Vec::with_capacity(lens.len());
    for &l in &lens {
        slices.push(tape.narrow_rows(vars[pos_table], 0, l)?);
    }
    let pos = tape.concat_rows(&slices)?;
    let tokens = tape.add(projected, pos)?;
    Ok(ModalityBatch {
        tokens,
        pos,
        layout,
    })
}

/// Project a batch of samples into the shared width and add positional
/// embeddings. Base features are not differentiated through.
pub fn project_batch<E: Element>(
    tape: &mut Tape<E>,
    vars: &[Var],
    ids: &FrontendIds,
    cfg: &ModelConfig,
    batch: &[&ShotSequenceSample],
) -> Result<ProjectedBatch> {
    if batch.is_empty() {
        return Err(NumericsError::Config("empty batch".into()));
    }
    for s in batch {
        if s.video_feats.cols() != cfg.d_v
            || s.audio_feats.cols() != cfg.d_a
            || s.text_tokens.cols() != cfg.d_l
        {
            return Err(NumericsError::Config(format!(
                "sample dims ({}, {}, {}) do not match model config ({}, {}, {})",
                s.video_feats.cols(),
                s.audio_feats.cols(),
                s.text_tokens.cols(),
                cfg.d_v,
                cfg.d_a,
                cfg.d_l
            )));
        }
    }
    let video = project_modality(
        tape,
        vars,
        &ids.proj_v,
        ids.pos_v,
        cfg.k_max,
        batch.iter().map(|s| &s.video_feats).collect(),
        "video",
    )?;
    let audio = project_modality(
        tape,
        vars,
        &ids.proj_a,
        ids.pos_a,
        cfg.k_max,
        batch.iter().map(|s| &s.audio_feats).collect(),
        "audio",
    )?;
    let text = project_modality(
        tape,
        vars,
        &ids.proj_l,
        ids.pos_l,
        cfg.s_max,
        batch.iter().map(|s| &s.text_tokens).collect(),
        "text",
    )?;
    Ok(ProjectedBatch { video, audio, text })
}

/// How many positions to mask in a sequence of length `n`: round half-up
/// with a floor of one mask per non-empty sequence.
pub fn masked_count(n: usize, rate: f64) -> usize {
    if n == 0 {
        return 0;
    }
    ((rate * n as f64 + 0.5).floor() as usize).max(1)
}

/// Masked positions per sample per modality; fully determined by the seed.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub rate: f64,
    pub seed: u64,
    pub video: Vec<Vec<usize>>,
    pub audio: Vec<Vec<usize>>,
    pub text: Vec<Vec<usize>>,
}

impl MaskPlan {
    pub fn build(
        rate: f64,
        video_lens: &[usize],
        audio_lens: &[usize],
        text_lens: &[usize],
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) || rate == 0.0 {
            return Err(NumericsError::Config(format!(
                "mask rate {rate} must be in (0, 1)"
            )));
        }
        let plan_modality = |label: &str, lens: &[usize]| -> Vec<Vec<usize>> {
            lens.iter()
                .enumerate()
                .map(|(i, &n)| {
                    if n == 0 {
                        return Vec::new();
                    }
                    let m = masked_count(n, rate);
                    let mut rng = rng_from(child_seed_n(child_seed(seed, label), "sample", i as u64));
                    let mut picks = index_sample(&mut rng, n, m).into_vec();
                    picks.sort_unstable();
                    picks
                })
                .collect()
        };
        Ok(MaskPlan {
            rate,
            seed,
            video: plan_modality("video", video_lens),
            audio: plan_modality("audio", audio_lens),
            text: plan_modality("text", text_lens),
        })
    }
}

/// Prediction targets for one modality: the pre-mask projected tokens at the
/// masked positions, plus those positions as rows of the batched matrix.
pub struct MaskTargets {
    pub values: Var,
    pub rows: Vec<usize>,
}

pub struct MaskedModality {
    pub tokens: Var,
    pub targets: Option<MaskTargets>,
}

/// Substitute masked positions with `mask embedding + positional embedding`
/// and snapshot the originals as targets. Unmasked rows pass through
/// unchanged. An empty position set is a no-op with no targets.
pub fn apply_mask<E: Element>(
    tape: &mut Tape<E>,
    vars: &[Var],
    batch: &ModalityBatch,
    mask_embedding: ParamId,
    positions: &[Vec<usize>],
) -> Result<MaskedModality> {
    if positions.len() != batch.layout.n_samples() {
        return Err(NumericsError::Config(format!(
            "mask plan covers {} samples, batch has {}",
            positions.len(),
            batch.layout.n_samples()
        )));
    }
    let mut rows: Vec<usize> = Vec::new();
    for (i, picks) in positions.iter().enumerate() {
        for &p in picks {
            if p >= batch.layout.len(i) {
                return Err(NumericsError::Config(format!(
                    "masked position {p} out of range for sample {i} (len {})",
                    batch.layout.len(i)
                )));
            }
            rows.push(batch.layout.global(i, p));
        }
    }
    if rows.is_empty() {
        return Ok(MaskedModality {
            tokens: batch.tokens,
            targets: None,
        });
    }
    let total = batch.layout.total();
    let width = tape.value(batch.tokens).cols();
    let mut keep = Tensor::filled(total, width, E::one());
    let mut drop = Tensor::zeros(total, width);
    let mut indicator = Tensor::zeros(total, 1);
    for &r in &rows {
        for v in keep.row_mut(r) {
            *v = E::zero();
        }
        for v in drop.row_mut(r) {
            *v = E::one();
        }
        indicator.set(r, 0, E::one());
    }
    let targets = tape.gather_rows(batch.tokens, rows.clone())?;
    let kept = tape.mul_mask(batch.tokens, keep)?;
    let pos_at_masked = tape.mul_mask(batch.pos, drop)?;
    let ind = tape.constant(indicator);
    let mask_rows = tape.matmul(ind, vars[mask_embedding])?;
    let with_pos = tape.add(kept, pos_at_masked)?;
    let tokens = tape.add(with_pos, mask_rows)?;
    Ok(MaskedModality {
        tokens,
        targets: Some(MaskTargets {
            values: targets,
            rows,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, sample_windows, CorpusManifest};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_v: 6,
            d_a: 5,
            d_l: 4,
            d: 8,
            n_heads: 2,
            n_layers: 2,
            k_max: 16,
            s_max: 64,
            ln_eps: 1e-5,
        }
    }

    fn tiny_samples() -> Vec<ShotSequenceSample> {
        let corpus = generate(&CorpusManifest {
            n_movies: 2,
            shots_per_movie: 12,
            d_v: 6,
            d_a: 5,
            d_l: 4,
            latent_dim: 4,
            seed: 33,
            sigma: 1.0,
            rho: 0.8,
            n_classes: 2,
            ..Default::default()
        })
        .unwrap();
        sample_windows(&corpus, 4, 4, 1).unwrap()
    }

    fn setup() -> (ParamStore<f32>, FrontendIds, ModelConfig) {
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        let ids = FrontendIds::init(&mut store, 7, &cfg);
        (store, ids, cfg)
    }

    #[test]
    fn projection_shape_is_len_by_d() {
        let (store, ids, cfg) = setup();
        let samples = tiny_samples();
        let batch: Vec<&ShotSequenceSample> = samples.iter().take(2).collect();
        let mut tape = Tape::new();
        let vars = store.inject(&mut tape);
        let p = project_batch(&mut tape, &vars, &ids, &cfg, &batch).unwrap();
        assert_eq!(tape.value(p.video.tokens).shape(), [8, cfg.d]);
        assert_eq!(tape.value(p.audio.tokens).shape(), [8, cfg.d]);
        let s_total: usize = batch.iter().map(|s| s.s()).sum();
        assert_eq!(tape.value(p.text.tokens).shape(), [s_total, cfg.d]);
    }

    #[test]
    fn zero_parameters_project_to_zero() {
        let (mut store, ids, cfg) = setup();
        for e in 0..store.len() {
            let t = store.get_mut(e);
            *t = Tensor::zeros(t.rows(), t.cols());
        }
        let samples = tiny_samples();
        let batch = vec![&samples[0]];
        let mut tape = Tape::new();
        let vars = store.inject(&mut tape);
        let p = project_batch(&mut tape, &vars, &ids, &cfg, &batch).unwrap();
        assert!(tape.value(p.video.tokens).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_reaches_projection_but_not_base_features() {
        let (store, ids, cfg) = setup();
        let samples = tiny_samples();
        let batch = vec![&samples[0]];
        let mut tape = Tape::new();
        let vars = store.inject(&mut tape);
        let base_feats_var = Var::from_raw(tape.len()); // first node of project_batch
        let p = project_batch(&mut tape, &vars, &ids, &cfg, &batch).unwrap();
        let pooled = tape.mean_axis(p.video.tokens, 0).unwrap();
        let loss = tape.mean_axis(pooled, 1).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.grad(vars[ids.proj_v.w]).is_some());
        assert!(grads.grad(vars[ids.pos_v]).is_some());
        assert!(
            grads.grad(base_feats_var).is_none(),
            "frozen base features must not receive a gradient"
        );
        assert!(grads.grad(vars[ids.proj_a.w]).is_none(), "audio untouched");
    }

    #[test]
    fn sequence_longer_than_position_table_is_config_error() {
        let (store, ids, mut cfg) = setup();
        cfg.k_max = 2; // force failure against k = 4 windows
        let samples = tiny_samples();
        let batch = vec![&samples[0]];
        let mut tape = Tape::new();
        let vars = store.inject(&mut tape);
        let err = project_batch(&mut tape, &vars, &ids, &cfg, &batch);
        assert!(matches!(err, Err(NumericsError::Config(_))));
    }

    #[test]
    fn masked_count_examples() {
        assert_eq!(masked_count(10, 0.2), 2);
        assert_eq!(masked_count(1, 0.2), 1);
        assert_eq!(masked_count(2, 0.2), 1);
        assert_eq!(masked_count(12, 0.2), 2);
        assert_eq!(masked_count(13, 0.2), 3);
        assert_eq!(masked_count(0, 0.2), 0);
    }

    #[test]
    fn masked_count_law_holds_for_all_lengths_up_to_512() {
        for n in 1..=512usize {
            let m = masked_count(n, 0.2);
            let expect = ((0.2 * n as f64 + 0.5).floor() as usize).max(1);
            assert_eq!(m, expect, "n = {n}");
            assert!((1..=n).contains(&m));
        }
    }

    proptest::proptest! {
        #[test]
        fn masked_count_law_for_any_rate(n in 1usize..=512, rate in 0.01f64..0.99) {
            let m = masked_count(n, rate);
            proptest::prop_assert!(m >= 1 && m <= n);
            let expect = ((rate * n as f64 + 0.5).floor() as usize).max(1);
            proptest::prop_assert_eq!(m, expect);
        }

        #[test]
        fn plans_respect_law_and_ranges(
            lens in proptest::collection::vec(1usize..40, 1..6),
            seed in 0u64..1000,
        ) {
            let plan = MaskPlan::build(0.2, &lens, &lens, &lens, seed).unwrap();
            for (i, picks) in plan.video.iter().enumerate() {
                proptest::prop_assert_eq!(picks.len(), masked_count(lens[i], 0.2));
                for &p in picks {
                    proptest::prop_assert!(p < lens[i]);
                }
                let mut dedup = picks.clone();
                dedup.dedup();
                proptest::prop_assert_eq!(dedup.len(), picks.len());
            }
        }
    }

    #[test]
    fn plans_are_seed_deterministic() {
        let lens = [4usize, 4, 4];
        let slens = [9usize, 12, 7];
        let a = MaskPlan::build(0.2, &lens, &lens, &slens, 5).unwrap();
        let b = MaskPlan::build(0.2, &lens, &lens, &slens, 5).unwrap();
        let c = MaskPlan::build(0.2, &lens, &lens, &slens, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (i, picks) in a.text.iter().enumerate() {
            assert_eq!(picks.len(), masked_count(slens[i], 0.2));
            let mut deduped = picks.clone();
            deduped.dedup();
            assert_eq!(&deduped, picks, "positions must be unique and sorted");
        }
    }

    #[test]
    fn mask_rate_bounds_checked() {
        assert!(MaskPlan::build(0.0, &[3], &[3], &[3], 0).is_err());
        assert!(MaskPlan::build(1.0, &[3], &[3], &[3], 0).is_err());
    }

    #[test]
    fn masking_preserves_unmasked_rows_and_snapshots_targets() {
        let (store, ids, cfg) = setup();
        let samples = tiny_samples();
        let batch: Vec<&ShotSequenceSample> = samples.iter().take(2).collect();
        let mut tape = Tape::new();
        let vars = store.inject(&mut tape);
        let p = project_batch(&mut tape, &vars, &ids, &cfg, &batch).unwrap();
        let plan = MaskPlan::build(
            0.2,
            &[4, 4],
            &[4, 4],
            &batch.iter().map(|s| s.s()).collect::<Vec<_>>(),
            9,
        )
        .unwrap();
        let masked = apply_mask(&mut tape, &vars, &p.video, ids.mask_v, &plan.video).unwrap();
        let targets = masked.targets.as_ref().unwrap();
        let clean = tape.value(p.video.tokens).clone();
        let dirty = tape.value(masked.tokens).clone();
        let target_vals = tape.value(targets.values).clone();
        for r in 0..clean.rows() {
            if let Some(tpos) = targets.rows.iter().position(|&x| x == r) {
                // masked row: target snapshot equals the clean row exactly
                assert_eq!(target_vals.row(tpos), clean.row(r));
                assert_ne!(dirty.row(r), clean.row(r));
            } else {
                assert_eq!(dirty.row(r), clean.row(r), "unmasked row {r} changed");
            }
        }
    }

    #[test]
    fn masked_rows_equal_mask_embedding_plus_position() {
        let (store, ids, cfg) = setup();
        let samples = tiny_samples();
        let batch = vec![&samples[0]];
        let mut tape = Tape::new();
        let vars = store.inject(&mut tape);
        let p = project_batch(&mut tape, &vars, &ids, &cfg, &batch).unwrap();
        let masked = apply_mask(&mut tape, &vars, &p.video, ids.mask_v, &[vec![2]]).unwrap();
        let emb = tape.value(vars[ids.mask_v]).clone();
        let pos = tape.value(p.video.pos).clone();
        let row = tape.value(masked.tokens).row(2).to_vec();
        for (j, &got) in row.iter().enumerate() {
            let want = emb.get(0, j) + pos.get(2, j);
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_position_set_is_noop() {
        let (store, ids, cfg) = setup();
        let samples = tiny_samples();
        let batch = vec![&samples[0]];
        let mut tape = Tape::new();
        let vars = store.inject(&mut tape);
        let p = project_batch(&mut tape, &vars, &ids, &cfg, &batch).unwrap();
        let masked = apply_mask(&mut tape, &vars, &p.video, ids.mask_v, &[vec![]]).unwrap();
        assert!(masked.targets.is_none());
        assert_eq!(masked.tokens, p.video.tokens);
    }
}
