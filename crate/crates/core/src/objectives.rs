//! Pretraining losses: masked-token prediction per modality, inter-modal
//! contrastive alignment (video as anchor against audio and shot-pooled
//! text), and the cross-modal contrastive term between audio-conditioned and
//! language-conditioned video features.
//!
//! The masking loss uses raw, untempered dot products; the contrastive terms
//! use cosine similarity divided by the temperature. Every term is a negated
//! log-softmax whose denominator runs over all in-batch candidates for a
//! fixed anchor, averaged over anchors.

use serde::{Deserialize, Serialize};

use crate::backbone::EncodedBatch;
use crate::corpus::ShotSequenceSample;
use crate::numerics::{Element, NumericsError, Result, Tape, Tensor, Var};

/// Which of the three loss families contribute to the total (the ablation
/// matrix toggles these).
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct LossToggles {
    pub intra: bool,
    pub inter: bool,
    pub cross: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            intra: true,
            inter: true,
            cross: true,
        }
    }
}

impl LossToggles {
    pub fn validate(&self) -> Result<()> {
        if !self.intra && !self.inter && !self.cross {
            return Err(NumericsError::Config(
                "at least one loss term must be enabled".into(),
            ));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match (self.intra, self.inter, self.cross) {
            (true, true, true) => "full".into(),
            (false, true, true) => "no-intra".into(),
            (true, false, true) => "no-inter".into(),
            (true, true, false) => "no-cross".into(),
            _ => format!(
                "intra={},inter={},cross={}",
                self.intra, self.inter, self.cross
            ),
        }
    }
}

fn default_tau() -> f64 {
    0.3
}

/// Softmax temperature for the contrastive terms.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct TemperatureConfig {
    #[serde(default = "default_tau")]
    pub tau: f64,
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        TemperatureConfig { tau: default_tau() }
    }
}

impl TemperatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(NumericsError::Config(format!(
                "temperature {} must be > 0",
                self.tau
            )));
        }
        Ok(())
    }
}

/// All loss scalars of one step, reported at f64 precision.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub intra: f64,
    pub inter: f64,
    pub cross: f64,
    pub total: f64,
    pub mask_video: f64,
    pub mask_audio: f64,
    pub mask_text: f64,
    pub video_to_audio: f64,
    pub audio_to_video: f64,
    pub video_to_text: f64,
    pub text_to_video: f64,
    pub va_to_vl: f64,
    pub vl_to_va: f64,
}

/// Masked-prediction loss over the batch's masked set: mean over predictions
/// of the cross entropy of `exp(pred . own_target)` against all targets.
/// Dot products are raw, with no normalization or temperature.
pub fn masking_loss<E: Element>(tape: &mut Tape<E>, predictions: Var, targets: Var) -> Result<Var> {
    let (p, t) = (tape.value(predictions), tape.value(targets));
    if p.shape() != t.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "masking_loss",
            lhs: p.shape(),
            rhs: t.shape(),
        });
    }
    let m = p.rows();
    let logits = tape.matmul_nt(predictions, targets)?;
    tape.softmax_cross_entropy(logits, (0..m).collect())
}

/// InfoNCE with in-batch negatives: anchors `X` and aligned candidates `Y`
/// (`X_m` pairs with `Y_m`); similarity is cosine over temperature `tau`,
/// denominator runs over all candidates, mean over anchors.
pub fn info_nce<E: Element>(tape: &mut Tape<E>, anchors: Var, candidates: Var, tau: f64) -> Result<Var> {
    TemperatureConfig { tau }.validate()?;
    let (x, y) = (tape.value(anchors), tape.value(candidates));
    if x.shape() != y.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "info_nce",
            lhs: x.shape(),
            rhs: y.shape(),
        });
    }
    let m = x.rows();
    let xn = tape.l2_normalize_rows(anchors)?;
    let yn = tape.l2_normalize_rows(candidates)?;
    let sims = tape.matmul_nt(xn, yn)?;
    let logits = tape.scale(sims, E::from_f64(1.0 / tau))?;
    tape.softmax_cross_entropy(logits, (0..m).collect())
}

/// Shot-level text pooling: mean of each shot's contextual token rows. Rows
/// of the output align one-to-one with the video rows of the batch. Shots
/// with zero tokens produce a zero row flagged invalid.
///
/// Returns the pooled rows and the list of valid row indices.
pub fn pool_text_by_shot<E: Element>(
    tape: &mut Tape<E>,
    text_ctx: Var,
    batch: &[&ShotSequenceSample],
) -> Result<(Var, Vec<usize>)> {
    let mut pooled_blocks = Vec::with_capacity(batch.len());
    let mut valid = Vec::new();
    let mut text_at = 0;
    let mut row_at = 0;
    for sample in batch {
        let k = sample.k();
        let s = sample.s();
        let mut pool = Tensor::zeros(k, s);
        for (i, &(start, end)) in sample.spans.iter().enumerate() {
            let c = end - start;
            if c == 0 {
                continue;
            }
            let w = E::from_f64(1.0 / c as f64);
            for j in start..end {
                pool.set(i, j, w);
            }
            valid.push(row_at + i);
        }
        let block = tape.narrow_rows(text_ctx, text_at, s)?;
        let pool_var = tape.constant(pool);
        pooled_blocks.push(tape.matmul(pool_var, block)?);
        text_at += s;
        row_at += k;
    }
    let pooled = tape.concat_rows(&pooled_blocks)?;
    if tape.value(text_ctx).rows() != text_at {
        return Err(NumericsError::Dimension {
            op: "pool_text_by_shot",
            detail: format!(
                "spans cover {text_at} token rows but text batch has {}",
                tape.value(text_ctx).rows()
            ),
        });
    }
    Ok((pooled, valid))
}

pub struct InterModalVars {
    pub total: Var,
    pub video_to_audio: Var,
    pub audio_to_video: Var,
    /// Absent when every pooled text row is invalid.
    pub video_to_text: Option<Var>,
    pub text_to_video: Option<Var>,
}

/// Eq-5-style symmetric inter-modal loss: video<->audio over all positions,
/// video<->pooled-text over positions with at least one language token.
pub fn inter_modal_loss<E: Element>(
    tape: &mut Tape<E>,
    video: Var,
    audio: Var,
    pooled_text: Var,
    valid_rows: &[usize],
    tau: f64,
) -> Result<InterModalVars> {
    let video_to_audio = info_nce(tape, video, audio, tau)?;
    let audio_to_video = info_nce(tape, audio, video, tau)?;
    let mut total = tape.add(video_to_audio, audio_to_video)?;
    let (video_to_text, text_to_video) = if valid_rows.is_empty() {
        log::warn!("no shots with language tokens in batch; text terms contribute 0");
        (None, None)
    } else {
        let v_valid = tape.gather_rows(video, valid_rows.to_vec())?;
        let t_valid = tape.gather_rows(pooled_text, valid_rows.to_vec())?;
        let v2t = info_nce(tape, v_valid, t_valid, tau)?;
        let t2v = info_nce(tape, t_valid, v_valid, tau)?;
        total = tape.add(total, v2t)?;
        total = tape.add(total, t2v)?;
        (Some(v2t), Some(t2v))
    };
    Ok(InterModalVars {
        total,
        video_to_audio,
        audio_to_video,
        video_to_text,
        text_to_video,
    })
}

pub struct CrossModalVars {
    pub total: Var,
    pub va_to_vl: Var,
    pub vl_to_va: Var,
}

/// Symmetric InfoNCE between audio-conditioned and language-conditioned
/// video features.
pub fn cross_modal_loss<E: Element>(
    tape: &mut Tape<E>,
    va: Var,
    vl: Var,
    tau: f64,
) -> Result<CrossModalVars> {
    let va_to_vl = info_nce(tape, va, vl, tau)?;
    let vl_to_va = info_nce(tape, vl, va, tau)?;
    let total = tape.add(va_to_vl, vl_to_va)?;
    Ok(CrossModalVars {
        total,
        va_to_vl,
        vl_to_va,
    })
}

pub struct IntraModalVars {
    pub total: Var,
    pub video: Option<Var>,
    pub audio: Option<Var>,
    pub text: Option<Var>,
}

pub struct LossVars {
    pub total: Var,
    pub intra: Option<IntraModalVars>,
    pub inter: Option<InterModalVars>,
    pub cross: Option<CrossModalVars>,
}

/// Assemble the total pretraining loss from one masked forward pass.
/// Disabled terms are simply not built, so they contribute neither value nor
/// gradient.
pub fn total_loss<E: Element>(
    tape: &mut Tape<E>,
    enc: &EncodedBatch,
    batch: &[&ShotSequenceSample],
    toggles: &LossToggles,
    tau: f64,
) -> Result<LossVars> {
    toggles.validate()?;
    let mut parts: Vec<Var> = Vec::new();

    let intra = if toggles.intra {
        let masks = enc.masks.as_ref().ok_or_else(|| {
            NumericsError::Config("intra-modal loss requires a masked forward pass".into())
        })?;
        let term = |tape: &mut Tape<E>, name: &str, pair: &Option<crate::backbone::MaskPair>| -> Result<Option<Var>> {
            match pair {
                Some(p) => Ok(Some(masking_loss(tape, p.predictions, p.targets)?)),
                None => {
                    log::warn!("no masked {name} tokens in batch; term contributes 0");
                    Ok(None)
                }
            }
        };
        let video = term(tape, "video", &masks.video)?;
        let audio = term(tape, "audio", &masks.audio)?;
        let text = term(tape, "text", &masks.text)?;
        let mut acc: Option<Var> = None;
        for t in [video, audio, text].into_iter().flatten() {
            acc = Some(match acc {
                None => t,
                Some(a) => tape.add(a, t)?,
            });
        }
        match acc {
            None => {
                log::warn!("intra-modal loss enabled but no modality had masked tokens");
                None
            }
            Some(total) => {
                parts.push(total);
                Some(IntraModalVars {
                    total,
                    video,
                    audio,
                    text,
                })
            }
        }
    } else {
        None
    };

    let inter = if toggles.inter {
        let (pooled, valid) = pool_text_by_shot(tape, enc.l_ctx, batch)?;
        let vars = inter_modal_loss(tape, enc.v_ctx, enc.a_ctx, pooled, &valid, tau)?;
        parts.push(vars.total);
        Some(vars)
    } else {
        None
    };

    let cross = if toggles.cross {
        let vars = cross_modal_loss(tape, enc.va_cross, enc.vl_cross, tau)?;
        parts.push(vars.total);
        Some(vars)
    } else {
        None
    };

    let mut total = *parts.first().ok_or_else(|| {
        NumericsError::Config("no loss terms produced a value for this batch".into())
    })?;
    for p in &parts[1..] {
        total = tape.add(total, *p)?;
    }
    Ok(LossVars {
        total,
        intra,
        inter,
        cross,
    })
}

impl LossVars {
    /// Extract the reported breakdown. Component sums are recomputed at f64,
    /// so `total = intra + inter + cross` holds to f64 precision in the
    /// report regardless of tape storage width.
    pub fn breakdown<E: Element>(&self, tape: &Tape<E>) -> LossBreakdown {
        let val = |v: Var| tape.value(v).item().to_f64();
        let opt = |v: &Option<Var>| v.map(val).unwrap_or(0.0);
        let (mask_video, mask_audio, mask_text) = match &self.intra {
            Some(i) => (opt(&i.video), opt(&i.audio), opt(&i.text)),
            None => (0.0, 0.0, 0.0),
        };
        let intra = mask_video + mask_audio + mask_text;
        let (v2a, a2v, v2t, t2v) = match &self.inter {
            Some(i) => (
                val(i.video_to_audio),
                val(i.audio_to_video),
                opt(&i.video_to_text),
                opt(&i.text_to_video),
            ),
            None => (0.0, 0.0, 0.0, 0.0),
        };
        let inter = v2a + a2v + v2t + t2v;
        let (va2vl, vl2va) = match &self.cross {
            Some(c) => (val(c.va_to_vl), val(c.vl_to_va)),
            None => (0.0, 0.0),
        };
        let cross = va2vl + vl2va;
        LossBreakdown {
            intra,
            inter,
            cross,
            total: intra + inter + cross,
            mask_video,
            mask_audio,
            mask_text,
            video_to_audio: v2a,
            audio_to_video: a2v,
            video_to_text: v2t,
            text_to_video: t2v,
            va_to_vl: va2vl,
            vl_to_va: vl2va,
        }
    }
}
