//! Window sampling: `k` consecutive shots per movie, no padding.

use rand::seq::SliceRandom;

use super::{Corpus, CorpusError, Result, SampleLabels, ShotSequenceSample};
use crate::numerics::Tensor;
use crate::rng::{child_seed, rng_from};

/// Enumerate windows of `k` consecutive shots at the given stride for every
/// movie, then shuffle the window order with `seed` (rows within a window
/// keep temporal order). Movies shorter than `k` are skipped with a warning;
/// short tails are dropped.
pub fn sample_windows(
    corpus: &Corpus,
    k: usize,
    stride: usize,
    seed: u64,
) -> Result<Vec<ShotSequenceSample>> {
    if k == 0 || stride == 0 {
        return Err(CorpusError::Sample("k and stride must be >= 1".into()));
    }
    if corpus.movies.is_empty() {
        return Err(CorpusError::Empty("no movies in corpus".into()));
    }
    let mut windows = Vec::new();
    for movie in &corpus.movies {
        let n = movie.shots.len();
        if n < k {
            log::warn!(
                "movie {} has {} shots < k = {k}; skipping",
                movie.id,
                n
            );
            continue;
        }
        let mut start = 0;
        while start + k <= n {
            let shots = &movie.shots[start..start + k];
            let mut video = Vec::new();
            let mut audio = Vec::new();
            let mut tokens: Vec<f32> = Vec::new();
            let mut spans = Vec::with_capacity(k);
            let mut latents = Vec::with_capacity(k);
            let mut at = 0;
            let d_l = corpus.manifest.d_l;
            for shot in shots {
                video.extend_from_slice(&shot.video);
                audio.extend_from_slice(&shot.audio);
                for t in &shot.tokens {
                    tokens.extend_from_slice(t);
                }
                spans.push((at, at + shot.tokens.len()));
                at += shot.tokens.len();
                latents.push(shot.latent.clone());
            }
            if at == 0 {
                log::warn!(
                    "movie {} window at {start} has no language tokens; skipping",
                    movie.id
                );
                start += stride;
                continue;
            }
            let sample = ShotSequenceSample {
                movie_id: movie.id.clone(),
                shot_ids: (start..start + k).collect(),
                video_feats: Tensor::from_vec(k, corpus.manifest.d_v, video)
                    .map_err(|e| CorpusError::Sample(e.to_string()))?,
                audio_feats: Tensor::from_vec(k, corpus.manifest.d_a, audio)
                    .map_err(|e| CorpusError::Sample(e.to_string()))?,
                text_tokens: Tensor::from_vec(at, d_l, tokens)
                    .map_err(|e| CorpusError::Sample(e.to_string()))?,
                spans,
                labels: SampleLabels {
                    class_id: movie.class_id,
                    engagement: movie.engagement,
                    latent_states: latents,
                },
            };
            sample.validate()?;
            windows.push(sample);
            start += stride;
        }
    }
    if windows.is_empty() {
        return Err(CorpusError::Empty(format!(
            "no windows of length {k} could be sampled"
        )));
    }
    let mut rng = rng_from(child_seed(seed, "windows"));
    windows.shuffle(&mut rng);
    Ok(windows)
}
