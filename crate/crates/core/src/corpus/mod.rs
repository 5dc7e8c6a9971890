//! Shot-sequence data model, synthetic corpus generation, and on-disk format.
//!
//! The generator stands in for frozen base encoders run over real movies:
//! each movie is a smooth latent walk with occasional scene-change jumps, and
//! every modality observes a fixed linear image of the latent mixed with
//! noise. The mixing weight `rho` controls how much cross-modal signal exists
//! at all, which is what the learning/null-signal harnesses sweep.

mod generator;
mod io;
mod windows;

pub use generator::{class_centroids, generate, generate_corpus, nearest_centroid};
pub use io::{read_corpus, write_corpus};
pub use windows::sample_windows;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("invalid sample: {0}")]
    Sample(String),
    #[error("corpus i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus format: {0}")]
    Format(String),
    #[error("empty corpus: {0}")]
    Empty(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

fn default_latent_dim() -> usize {
    16
}

/// Everything needed to regenerate a corpus byte-for-byte.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CorpusManifest {
    pub n_movies: usize,
    pub shots_per_movie: usize,
    pub d_v: usize,
    pub d_a: usize,
    pub d_l: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    pub seed: u64,
    /// Noise level sigma (>= 0).
    pub sigma: f64,
    /// Cross-modal signal strength in [0, 1].
    pub rho: f64,
    pub n_classes: usize,
    /// Permit shots with zero language tokens (degenerate-span path).
    #[serde(default)]
    pub allow_empty_spans: bool,
    pub version: u32,
}

impl Default for CorpusManifest {
    fn default() -> Self {
        CorpusManifest {
            n_movies: 50,
            shots_per_movie: 200,
            d_v: 64,
            d_a: 48,
            d_l: 32,
            latent_dim: 16,
            seed: 0,
            sigma: 1.0,
            rho: 0.9,
            n_classes: 4,
            allow_empty_spans: false,
            version: FORMAT_VERSION,
        }
    }
}

impl CorpusManifest {
    pub fn validate(&self) -> Result<()> {
        if self.n_movies == 0 || self.shots_per_movie == 0 {
            return Err(CorpusError::Manifest("movie/shot counts must be >= 1".into()));
        }
        if self.d_v == 0 || self.d_a == 0 || self.d_l == 0 || self.latent_dim == 0 {
            return Err(CorpusError::Manifest("feature dims must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(CorpusError::Manifest(format!("rho {} not in [0, 1]", self.rho)));
        }
        if self.sigma < 0.0 || !self.sigma.is_finite() {
            return Err(CorpusError::Manifest(format!("sigma {} must be >= 0", self.sigma)));
        }
        if self.n_classes < 2 {
            return Err(CorpusError::Manifest("need at least 2 classes".into()));
        }
        Ok(())
    }
}

/// One shot's observations across modalities, plus the latent that produced
/// them (an oracle for tests; never a model input).
#[derive(Clone, Debug, PartialEq)]
pub struct Shot {
    pub video: Vec<f32>,
    pub audio: Vec<f32>,
    pub tokens: Vec<Vec<f32>>,
    pub latent: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Movie {
    pub id: String,
    pub shots: Vec<Shot>,
    pub class_id: usize,
    pub engagement: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub movies: Vec<Movie>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleLabels {
    pub class_id: usize,
    pub engagement: f32,
    /// Per-shot latents; oracle only.
    pub latent_states: Vec<Vec<f32>>,
}

/// One training example: `k` consecutive shots of one movie with spans
/// mapping each shot to its language tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ShotSequenceSample {
    pub movie_id: String,
    /// Movie-local shot indices in temporal order.
    pub shot_ids: Vec<usize>,
    pub video_feats: Tensor<f32>,
    pub audio_feats: Tensor<f32>,
    /// `s x d_l`; `s` is the total token count over the window.
    pub text_tokens: Tensor<f32>,
    /// Half-open token ranges per shot, rebased to the window.
    pub spans: Vec<(usize, usize)>,
    pub labels: SampleLabels,
}

impl ShotSequenceSample {
    pub fn k(&self) -> usize {
        self.shot_ids.len()
    }

    pub fn s(&self) -> usize {
        self.text_tokens.rows()
    }

    /// Token count of shot `i` (the `C_i` of the one-to-many pooling).
    pub fn span_len(&self, i: usize) -> usize {
        self.spans[i].1 - self.spans[i].0
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 {
            return Err(CorpusError::Sample("k must be >= 1".into()));
        }
        if self.video_feats.rows() != k || self.audio_feats.rows() != k || self.spans.len() != k {
            return Err(CorpusError::Sample("per-shot lengths disagree".into()));
        }
        let mut at = 0;
        for &(start, end) in &self.spans {
            if start != at || end < start {
                return Err(CorpusError::Sample(format!(
                    "spans must be sorted, non-overlapping, and cover [0, s): got ({start}, {end}) at {at}"
                )));
            }
            at = end;
        }
        if at != self.s() {
            return Err(CorpusError::Sample(format!(
                "span lengths sum to {at}, but s = {}",
                self.s()
            )));
        }
        if !self.video_feats.is_finite()
            || !self.audio_feats.is_finite()
            || !self.text_tokens.is_finite()
        {
            return Err(CorpusError::Sample("non-finite feature values".into()));
        }
        Ok(())
    }
}
