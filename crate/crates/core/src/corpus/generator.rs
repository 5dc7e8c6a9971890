//! Synthetic corpus generator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Corpus, CorpusManifest, Movie, Result, Shot};
use crate::numerics::Tensor;
use crate::rng::{child_seed, child_seed_n, rng_from};

/// AR(1) smoothness of the latent walk between scene changes.
const WALK_ALPHA: f64 = 0.95;
/// Per-shot probability of a scene-change jump (fresh latent draw).
const JUMP_PROB: f64 = 0.08;
/// Language tokens per shot are drawn uniformly from 1..=MAX (0..=MAX when
/// empty spans are allowed).
const MAX_TOKENS_PER_SHOT: usize = 5;
const ENGAGEMENT_NOISE_STD: f64 = 0.1;

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Fixed random linear map latent -> feature space, entries N(0, 1/sqrt(m))
/// so feature coordinates stay O(1).
fn mixing_map(seed: u64, m: usize, d: usize) -> Tensor<f64> {
    let mut rng = rng_from(seed);
    let scale = 1.0 / (m as f64).sqrt();
    let data: Vec<f64> = (0..m * d)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect();
    Tensor::from_vec(m, d, data).expect("positive dims")
}

fn apply_map(z: &[f64], map: &Tensor<f64>) -> Vec<f64> {
    let mut out = vec![0.0; map.cols()];
    for (i, &zi) in z.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(map.row(i)) {
            *o += zi * w;
        }
    }
    out
}

/// The class centroids for a manifest: `n_classes` random unit vectors in
/// latent space. Unit length keeps nearest-centroid assignment balanced on
/// the symmetric movie-mean distribution. Deterministic, so downstream
/// harnesses can re-derive per-shot oracle labels.
pub fn class_centroids(manifest: &CorpusManifest) -> Vec<Vec<f64>> {
    let mut rng = rng_from(child_seed(manifest.seed, "centroids"));
    (0..manifest.n_classes)
        .map(|_| {
            let v = normal_vec(&mut rng, manifest.latent_dim);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

pub fn nearest_centroid(z: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, mu) in centroids.iter().enumerate() {
        let d: f64 = z.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Generate the full corpus in memory. Deterministic given the manifest.
pub fn generate(manifest: &CorpusManifest) -> Result<Corpus> {
    manifest.validate()?;
    let m = manifest.latent_dim;
    let map_v = mixing_map(child_seed(manifest.seed, "map-v"), m, manifest.d_v);
    let map_a = mixing_map(child_seed(manifest.seed, "map-a"), m, manifest.d_a);
    let map_l = mixing_map(child_seed(manifest.seed, "map-l"), m, manifest.d_l);
    let centroids = class_centroids(manifest);
    let engagement_dir = {
        let mut rng = rng_from(child_seed(manifest.seed, "engagement"));
        let v = normal_vec(&mut rng, m);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };

    let rho = manifest.rho;
    let noise = (1.0 - rho) * manifest.sigma;
    let min_tokens = if manifest.allow_empty_spans { 0 } else { 1 };

    let mut movies = Vec::with_capacity(manifest.n_movies);
    for mi in 0..manifest.n_movies {
        let mut rng = rng_from(child_seed_n(manifest.seed, "movie", mi as u64));
        // Latent walk: smooth AR(1) with occasional scene-change jumps.
        let mut latents: Vec<Vec<f64>> = Vec::with_capacity(manifest.shots_per_movie);
        let mut z = normal_vec(&mut rng, m);
        latents.push(z.clone());
        for _ in 1..manifest.shots_per_movie {
            if rng.gen::<f64>() < JUMP_PROB {
                z = normal_vec(&mut rng, m);
            } else {
                let e = normal_vec(&mut rng, m);
                let spread = (1.0 - WALK_ALPHA * WALK_ALPHA).sqrt();
                for (zi, ei) in z.iter_mut().zip(e) {
                    *zi = WALK_ALPHA * *zi + spread * ei;
                }
            }
            latents.push(z.clone());
        }

        let mut shots = Vec::with_capacity(manifest.shots_per_movie);
        for z in &latents {
            let emit = |signal: Vec<f64>, rng: &mut ChaCha8Rng| -> Vec<f32> {
                signal
                    .into_iter()
                    .map(|s| {
                        let e: f64 = rng.sample(StandardNormal);
                        (rho * s + noise * e) as f32
                    })
                    .collect()
            };
            let video = emit(apply_map(z, &map_v), &mut rng);
            let audio = emit(apply_map(z, &map_a), &mut rng);
            let n_tokens = rng.gen_range(min_tokens..=MAX_TOKENS_PER_SHOT);
            let text_signal = apply_map(z, &map_l);
            let tokens: Vec<Vec<f32>> = (0..n_tokens)
                .map(|_| emit(text_signal.clone(), &mut rng))
                .collect();
            shots.push(Shot {
                video,
                audio,
                tokens,
                latent: z.iter().map(|&x| x as f32).collect(),
            });
        }

        let mut mean_z = vec![0.0f64; m];
        for z in &latents {
            for (acc, &zi) in mean_z.iter_mut().zip(z) {
                *acc += zi / manifest.shots_per_movie as f64;
            }
        }
        let class_id = nearest_centroid(&mean_z, &centroids);
        let noise_e: f64 = rng.sample(StandardNormal);
        let engagement = (mean_z
            .iter()
            .zip(&engagement_dir)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + ENGAGEMENT_NOISE_STD * noise_e) as f32;

        movies.push(Movie {
            id: format!("movie_{mi:05}"),
            shots,
            class_id,
            engagement,
        });
    }

    Ok(Corpus {
        manifest: manifest.clone(),
        movies,
    })
}

/// Generate and write to disk in one go.
pub fn generate_corpus(manifest: &CorpusManifest, path: &std::path::Path) -> Result<Corpus> {
    let corpus = generate(manifest)?;
    super::io::write_corpus(&corpus, path)?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_manifest(rho: f64, sigma: f64) -> CorpusManifest {
        CorpusManifest {
            n_movies: 4,
            shots_per_movie: 30,
            d_v: 12,
            d_a: 10,
            d_l: 8,
            latent_dim: 6,
            seed: 21,
            sigma,
            rho,
            n_classes: 3,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let m = small_manifest(0.7, 1.0);
        let a = generate(&m).unwrap();
        let b = generate(&m).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_free_features_are_exact_linear_images() {
        let m = small_manifest(1.0, 0.0);
        let corpus = generate(&m).unwrap();
        let map_v = mixing_map(child_seed(m.seed, "map-v"), m.latent_dim, m.d_v);
        for movie in &corpus.movies {
            for shot in &movie.shots {
                let z: Vec<f64> = shot.latent.iter().map(|&x| f64::from(x)).collect();
                let expect = apply_map(&z, &map_v);
                for (got, want) in shot.video.iter().zip(expect) {
                    assert!((f64::from(*got) - want).abs() < 1e-6);
                }
                // all tokens of a shot collapse onto the same image
                for tok in &shot.tokens[1..] {
                    assert_eq!(tok, &shot.tokens[0]);
                }
            }
        }
    }

    #[test]
    fn noise_free_nearest_neighbor_video_to_audio_is_a_bijection() {
        let m = small_manifest(1.0, 0.0);
        let corpus = generate(&m).unwrap();
        let map_a = mixing_map(child_seed(m.seed, "map-a"), m.latent_dim, m.d_a);
        let movie = &corpus.movies[0];
        let mut hits = vec![false; movie.shots.len()];
        for (i, shot) in movie.shots.iter().enumerate() {
            let z: Vec<f64> = shot.latent.iter().map(|&x| f64::from(x)).collect();
            let predicted_audio = apply_map(&z, &map_a);
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for (j, other) in movie.shots.iter().enumerate() {
                let d: f64 = other
                    .audio
                    .iter()
                    .zip(&predicted_audio)
                    .map(|(a, b)| (f64::from(*a) - b).powi(2))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assert_eq!(best, i, "shot {i} did not map to its own audio");
            hits[best] = true;
        }
        assert!(hits.iter().all(|&h| h));
    }

    #[test]
    fn rho_zero_leaves_modalities_uncorrelated() {
        // Empirical correlation oracle over ~10k shots: project video and
        // audio onto fixed directions and check |r| is small.
        let m = CorpusManifest {
            n_movies: 50,
            shots_per_movie: 200,
            rho: 0.0,
            sigma: 1.0,
            seed: 5,
            ..small_manifest(0.0, 1.0)
        };
        let corpus = generate(&m).unwrap();
        let mut rng = rng_from(999);
        for _ in 0..4 {
            let u = normal_vec(&mut rng, m.d_v);
            let w = normal_vec(&mut rng, m.d_a);
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for movie in &corpus.movies {
                for shot in &movie.shots {
                    xs.push(
                        shot.video
                            .iter()
                            .zip(&u)
                            .map(|(a, b)| f64::from(*a) * b)
                            .sum::<f64>(),
                    );
                    ys.push(
                        shot.audio
                            .iter()
                            .zip(&w)
                            .map(|(a, b)| f64::from(*a) * b)
                            .sum::<f64>(),
                    );
                }
            }
            let n = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
            let sx = (xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n).sqrt();
            let sy = (ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n).sqrt();
            let r = cov / (sx * sy);
            assert!(r.abs() < 0.05, "|r| = {} at 10k shots", r.abs());
        }
    }

    #[test]
    fn class_ids_roughly_balanced() {
        let m = CorpusManifest {
            n_movies: 400,
            shots_per_movie: 40,
            seed: 3,
            n_classes: 4,
            ..small_manifest(0.9, 1.0)
        };
        let corpus = generate(&m).unwrap();
        let mut counts = vec![0usize; m.n_classes];
        for movie in &corpus.movies {
            counts[movie.class_id] += 1;
        }
        for &c in &counts {
            let share = c as f64 / m.n_movies as f64;
            assert!(
                (share - 0.25).abs() < 0.12,
                "class share {share} too far from 1/4: {counts:?}"
            );
        }
    }

    #[test]
    fn empty_spans_only_when_allowed() {
        let strict = generate(&small_manifest(0.5, 1.0)).unwrap();
        for movie in &strict.movies {
            for shot in &movie.shots {
                assert!(!shot.tokens.is_empty());
            }
        }
        let relaxed = generate(&CorpusManifest {
            allow_empty_spans: true,
            shots_per_movie: 300,
            ..small_manifest(0.5, 1.0)
        })
        .unwrap();
        let empties: usize = relaxed
            .movies
            .iter()
            .flat_map(|mv| &mv.shots)
            .filter(|s| s.tokens.is_empty())
            .count();
        assert!(empties > 0, "expected some empty shots when allowed");
    }

    #[test]
    fn rejects_bad_manifests() {
        let mut m = small_manifest(0.5, 1.0);
        m.rho = 1.5;
        assert!(generate(&m).is_err());
        let mut m = small_manifest(0.5, 1.0);
        m.sigma = -1.0;
        assert!(generate(&m).is_err());
        let mut m = small_manifest(0.5, 1.0);
        m.d_l = 0;
        assert!(generate(&m).is_err());
    }
}
