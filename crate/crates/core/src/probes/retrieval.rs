//! Cross-modal retrieval metrics: per-query rank of the ground-truth
//! candidate under cosine distance, Recall@K, median and mean rank.

use serde::Serialize;

use super::{ProbeError, Result};

#[derive(Clone, Debug, Serialize)]
pub struct RetrievalReport {
    /// 1-based rank of the ground-truth candidate per query.
    pub ranks: Vec<usize>,
    /// `(K, recall)` pairs in the requested K order.
    pub recall_at: Vec<(usize, f64)>,
    pub median_rank: f64,
    pub mean_rank: f64,
    pub pool_size: usize,
}

fn cosine_distance(a: &[f32], b: &[f32], qi: usize, ci: usize) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    let na: f64 = a.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&y| f64::from(y) * f64::from(y)).sum::<f64>().sqrt();
    if na == 0.0 {
        return Err(ProbeError::Invalid(format!("query {qi} has zero norm")));
    }
    if nb == 0.0 {
        return Err(ProbeError::Invalid(format!("candidate {ci} has zero norm")));
    }
    Ok(1.0 - dot / (na * nb))
}

/// Rank every query's ground-truth candidate among the full pool by cosine
/// distance ascending, ties broken by candidate index.
///
/// `pairing[q]` is the index of query `q`'s true candidate; it must be an
/// injection into the pool.
pub fn retrieval_eval(
    queries: &[Vec<f32>],
    candidates: &[Vec<f32>],
    pairing: &[usize],
    ks: &[usize],
) -> Result<RetrievalReport> {
    if queries.is_empty() || candidates.is_empty() {
        return Err(ProbeError::Invalid("empty query or candidate set".into()));
    }
    if pairing.len() != queries.len() {
        return Err(ProbeError::Invalid(format!(
            "{} pairings for {} queries",
            pairing.len(),
            queries.len()
        )));
    }
    let mut seen = vec![false; candidates.len()];
    for &c in pairing {
        if c >= candidates.len() {
            return Err(ProbeError::Invalid(format!(
                "ground-truth candidate {c} missing from pool of {}",
                candidates.len()
            )));
        }
        if seen[c] {
            return Err(ProbeError::Invalid(format!(
                "pairing is not a bijection: candidate {c} repeats"
            )));
        }
        seen[c] = true;
    }

    let mut ranks = Vec::with_capacity(queries.len());
    for (qi, q) in queries.iter().enumerate() {
        let truth = pairing[qi];
        let d_truth = cosine_distance(q, &candidates[truth], qi, truth)?;
        let mut ahead = 0usize;
        for (ci, c) in candidates.iter().enumerate() {
            if ci == truth {
                continue;
            }
            let d = cosine_distance(q, c, qi, ci)?;
            // sort key is (distance, candidate index)
            if d < d_truth || (d == d_truth && ci < truth) {
                ahead += 1;
            }
        }
        ranks.push(ahead + 1);
    }

    let recall_at = ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r <= k).count();
            (k, hits as f64 / ranks.len() as f64)
        })
        .collect();
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    let n = sorted.len();
    let median_rank = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    let mean_rank = sorted.iter().sum::<usize>() as f64 / n as f64;
    Ok(RetrievalReport {
        ranks,
        recall_at,
        median_rank,
        mean_rank,
        pool_size: candidates.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Quadratic-time oracle: explicitly sort (distance, index) pairs.
    pub(crate) fn brute_force_ranks(
        queries: &[Vec<f32>],
        candidates: &[Vec<f32>],
        pairing: &[usize],
    ) -> Vec<usize> {
        queries
            .iter()
            .enumerate()
            .map(|(qi, q)| {
                let mut order: Vec<(f64, usize)> = candidates
                    .iter()
                    .enumerate()
                    .map(|(ci, c)| (cosine_distance(q, c, qi, ci).unwrap(), ci))
                    .collect();
                order.sort_by(|a, b| a.partial_cmp(b).unwrap());
                order.iter().position(|&(_, ci)| ci == pairing[qi]).unwrap() + 1
            })
            .collect()
    }

    #[test]
    fn identical_paired_embeddings_rank_first() {
        let pool: Vec<Vec<f32>> = (0..50)
            .map(|i| vec![(i as f32).sin(), (i as f32).cos(), 1.0])
            .collect();
        let pairing: Vec<usize> = (0..50).collect();
        let report = retrieval_eval(&pool, &pool, &pairing, &[1, 5, 10]).unwrap();
        assert!(report.ranks.iter().all(|&r| r == 1));
        assert_eq!(report.recall_at[0], (1, 1.0));
        assert_eq!(report.median_rank, 1.0);
    }

    #[test]
    fn crafted_five_candidate_pool_matches_sort_oracle() {
        // candidate 2 is closest, 0 ties with 3 (tie broken by index)
        let queries = vec![vec![1.0f32, 0.0]];
        let candidates = vec![
            vec![0.8, 0.6],
            vec![-1.0, 0.0],
            vec![0.99, 0.14],
            vec![0.8, -0.6],
            vec![0.0, 1.0],
        ];
        for truth in 0..5 {
            let report =
                retrieval_eval(&queries, &candidates, &[truth], &[1, 5]).unwrap();
            let oracle = brute_force_ranks(&queries, &candidates, &[truth]);
            assert_eq!(report.ranks, oracle, "truth = {truth}");
        }
    }

    #[test]
    fn random_pools_match_oracle_rank_for_rank() {
        let mut rng = crate::rng::rng_from(41);
        for trial in 0..25 {
            let pool = rng.gen_range(5..60);
            let nq = rng.gen_range(1..pool);
            let dim = rng.gen_range(2..6);
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f32> {
                (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
            };
            let queries: Vec<Vec<f32>> = (0..nq).map(|_| mk(&mut rng)).collect();
            let candidates: Vec<Vec<f32>> = (0..pool).map(|_| mk(&mut rng)).collect();
            let mut pairing: Vec<usize> = (0..pool).collect();
            use rand::seq::SliceRandom;
            pairing.shuffle(&mut rng);
            pairing.truncate(nq);
            let report = retrieval_eval(&queries, &candidates, &pairing, &[1]).unwrap();
            assert_eq!(
                report.ranks,
                brute_force_ranks(&queries, &candidates, &pairing),
                "trial {trial}"
            );
        }
    }

    #[test]
    fn recall_is_monotone_in_k() {
        let mut rng = crate::rng::rng_from(43);
        let candidates: Vec<Vec<f32>> = (0..40)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let queries: Vec<Vec<f32>> = (0..20)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let pairing: Vec<usize> = (0..20).collect();
        let report = retrieval_eval(&queries, &candidates, &pairing, &[1, 5, 10, 40]).unwrap();
        for w in report.recall_at.windows(2) {
            assert!(w[0].1 <= w[1].1, "recall must be non-decreasing in K");
        }
        assert_eq!(report.recall_at.last().unwrap().1, 1.0);
        assert!(report.ranks.iter().all(|&r| (1..=40).contains(&r)));
    }

    #[test]
    fn bad_pairings_are_rejected() {
        let e = vec![vec![1.0f32]];
        assert!(retrieval_eval(&e, &e, &[1], &[1]).is_err()); // out of pool
        let two = vec![vec![1.0f32], vec![2.0]];
        assert!(retrieval_eval(&two, &two, &[0, 0], &[1]).is_err()); // repeat
    }

    #[test]
    fn zero_norm_vectors_are_rejected() {
        let q = vec![vec![0.0f32, 0.0]];
        let c = vec![vec![1.0f32, 0.0]];
        assert!(retrieval_eval(&q, &c, &[0], &[1]).is_err());
    }
}
