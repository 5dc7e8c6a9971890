//! Feature extraction from a pretrained backbone, with the time-average +
//! concatenate combination scheme.

use crate::backbone::{encode_batch, ModelIds};
use crate::corpus::ShotSequenceSample;
use crate::frontend::ModelConfig;
use crate::numerics::{Tape, Tensor};
use crate::objectives::pool_text_by_shot;
use crate::params::ParamStore;

use super::{ProbeError, Result};

/// The individual representations a probe can request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    VBase,
    ABase,
    VContext,
    AContext,
    LContext,
    VaCross,
    VlCross,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 7] = [
        FeatureKind::VBase,
        FeatureKind::ABase,
        FeatureKind::VContext,
        FeatureKind::AContext,
        FeatureKind::LContext,
        FeatureKind::VaCross,
        FeatureKind::VlCross,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FeatureKind::VBase => "v-base",
            FeatureKind::ABase => "a-base",
            FeatureKind::VContext => "v-context",
            FeatureKind::AContext => "a-context",
            FeatureKind::LContext => "l-context",
            FeatureKind::VaCross => "va-cross",
            FeatureKind::VlCross => "vl-cross",
        }
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        FeatureKind::ALL
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| {
                format!(
                    "unknown feature '{s}' (expected one of {})",
                    FeatureKind::ALL.map(|k| k.name()).join(", ")
                )
            })
    }
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// An ordered, duplicate-free list of requested features.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureSpec(Vec<FeatureKind>);

impl FeatureSpec {
    pub fn new(kinds: Vec<FeatureKind>) -> Result<Self> {
        if kinds.is_empty() {
            return Err(ProbeError::Invalid("feature spec is empty".into()));
        }
        for (i, k) in kinds.iter().enumerate() {
            if kinds[..i].contains(k) {
                return Err(ProbeError::Invalid(format!("duplicate feature '{k}'")));
            }
        }
        Ok(FeatureSpec(kinds))
    }

    pub fn parse(s: &str) -> Result<Self> {
        let kinds = s
            .split(',')
            .map(|p| p.trim().parse::<FeatureKind>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(ProbeError::Invalid)?;
        FeatureSpec::new(kinds)
    }

    pub fn kinds(&self) -> &[FeatureKind] {
        &self.0
    }

    pub fn to_string_spec(&self) -> String {
        self.0
            .iter()
            .map(|k| k.name())
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// One sample's extracted representations (plain values, off-tape).
pub struct SampleEncoding {
    pub v_base: Tensor<f32>,
    pub a_base: Tensor<f32>,
    pub v_ctx: Tensor<f32>,
    pub a_ctx: Tensor<f32>,
    pub l_ctx: Tensor<f32>,
    /// Shot-pooled text rows (aligned with video rows); invalid shots are
    /// zero rows.
    pub l_pooled: Tensor<f32>,
    pub va_cross: Tensor<f32>,
    pub vl_cross: Tensor<f32>,
}

impl SampleEncoding {
    fn sequence(&self, kind: FeatureKind) -> &Tensor<f32> {
        match kind {
            FeatureKind::VBase => &self.v_base,
            FeatureKind::ABase => &self.a_base,
            FeatureKind::VContext => &self.v_ctx,
            FeatureKind::AContext => &self.a_ctx,
            FeatureKind::LContext => &self.l_ctx,
            FeatureKind::VaCross => &self.va_cross,
            FeatureKind::VlCross => &self.vl_cross,
        }
    }
}

const ENCODE_BATCH: usize = 16;

/// Run the backbone (masking disabled) over samples and extract every
/// representation per sample. Samples may have ragged lengths.
pub fn encode_samples(
    store: &ParamStore<f32>,
    ids: &ModelIds,
    cfg: &ModelConfig,
    samples: &[&ShotSequenceSample],
) -> Result<Vec<SampleEncoding>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(ENCODE_BATCH) {
        let mut tape = Tape::new();
        let vars = store.inject(&mut tape);
        let enc = encode_batch(&mut tape, &vars, ids, cfg, chunk, None)?;
        let (pooled_var, _valid) = pool_text_by_shot(&mut tape, enc.l_ctx, chunk)?;
        let slice_rows = |t: &Tensor<f32>, start: usize, len: usize| {
            let mut m = Tensor::zeros(len, t.cols());
            for i in 0..len {
                m.row_mut(i).copy_from_slice(t.row(start + i));
            }
            m
        };
        let v_ctx_all = tape.value(enc.v_ctx).clone();
        let a_ctx_all = tape.value(enc.a_ctx).clone();
        let l_ctx_all = tape.value(enc.l_ctx).clone();
        let va_all = tape.value(enc.va_cross).clone();
        let vl_all = tape.value(enc.vl_cross).clone();
        let pooled_all = tape.value(pooled_var).clone();
        for (i, s) in chunk.iter().enumerate() {
            let kv = enc.video_layout.start(i);
            let k = enc.video_layout.len(i);
            let st = enc.text_layout.start(i);
            let sl = enc.text_layout.len(i);
            out.push(SampleEncoding {
                v_base: s.video_feats.clone(),
                a_base: s.audio_feats.clone(),
                v_ctx: slice_rows(&v_ctx_all, kv, k),
                a_ctx: slice_rows(&a_ctx_all, kv, k),
                l_ctx: slice_rows(&l_ctx_all, st, sl),
                l_pooled: slice_rows(&pooled_all, kv, k),
                va_cross: slice_rows(&va_all, kv, k),
                vl_cross: slice_rows(&vl_all, kv, k),
            });
        }
    }
    Ok(out)
}

fn time_average(t: &Tensor<f32>) -> Vec<f32> {
    let mut mean = vec![0.0f32; t.cols()];
    let inv = 1.0 / t.rows() as f32;
    for i in 0..t.rows() {
        for (m, &x) in mean.iter_mut().zip(t.row(i)) {
            *m += x * inv;
        }
    }
    mean
}

/// Time-average each requested representation over its sequence axis and
/// concatenate in spec order.
pub fn feature_vector(enc: &SampleEncoding, spec: &FeatureSpec) -> Vec<f32> {
    let mut out = Vec::new();
    for kind in spec.kinds() {
        out.extend(time_average(enc.sequence(*kind)));
    }
    out
}

/// Per-shot feature rows (no time averaging): one row per shot, each the
/// concatenation of the requested representations at that shot. Text uses
/// the shot-pooled rows so lengths line up.
pub fn per_shot_rows(enc: &SampleEncoding, spec: &FeatureSpec) -> Vec<Vec<f32>> {
    let k = enc.v_ctx.rows();
    let mut rows = vec![Vec::new(); k];
    for kind in spec.kinds() {
        let seq = match kind {
            FeatureKind::LContext => &enc.l_pooled,
            other => enc.sequence(*other),
        };
        for (i, row) in rows.iter_mut().enumerate() {
            row.extend_from_slice(seq.row(i));
        }
    }
    rows
}
