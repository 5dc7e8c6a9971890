//! Central finite-difference verification of tape gradients.
//!
//! Runs at `f64` only: at 32-bit precision the difference quotient drowns in
//! rounding noise long before it says anything about the analytic gradient.

use rand::seq::index::sample as index_sample;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::{NumericsError, Result};
use crate::rng;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub epsilon: f64,
    /// Maximum acceptable relative error.
    pub tolerance: f64,
    /// Coordinates sampled per parameter tensor (all, if the tensor is
    /// smaller).
    pub coords_per_tensor: usize,
    /// Scale floor of the relative-error denominator,
    /// `|a - n| / max(|a|, |n|, floor)`. Below the floor a gradient is held
    /// to absolute accuracy `floor * tolerance`: a central difference of a
    /// loss of size L carries ~`eps_f64 * L / epsilon` of rounding noise, so
    /// truly tiny gradients cannot be certified in relative terms at all.
    pub scale_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            tolerance: 1e-4,
            coords_per_tensor: 8,
            scale_floor: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Index of the parameter tensor holding the worst coordinate.
    pub worst_param: usize,
    pub worst_coord: usize,
    pub coords_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Verify the analytic gradient of a scalar loss against central finite
/// differences, sampling coordinates of every parameter tensor.
///
/// `build` must construct the loss on the given tape from the parameter vars
/// it is handed (one per entry of `params`, same order) and be deterministic;
/// two evaluations at the same point must agree bit-for-bit.
pub fn grad_check<F>(
    params: &[Tensor<f64>],
    build: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let base = eval(params)?;
    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(NumericsError::Determinism(format!(
            "two evaluations at the same point differ: {base} vs {again}"
        )));
    }

    // Analytic gradients from one backward pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: 0,
        worst_coord: 0,
        coords_checked: 0,
        tolerance: cfg.tolerance,
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let n = p.len();
        let coords: Vec<usize> = if n <= cfg.coords_per_tensor {
            (0..n).collect()
        } else {
            let mut r = rng::rng_from(rng::child_seed_n(cfg.seed, "gradcheck", pi as u64));
            let mut v = index_sample(&mut r, n, cfg.coords_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let analytic_tensor = grads.grad(vars[pi]);
        for c in coords {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + cfg.epsilon;
            let up = eval(&work)?;
            work[pi].data_mut()[c] = orig - cfg.epsilon;
            let down = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * cfg.epsilon);
            let analytic = analytic_tensor.map_or(0.0, |t| t.data()[c]);
            let denom = analytic.abs().max(numeric.abs()).max(cfg.scale_floor);
            let rel = (analytic - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = pi;
                report.worst_coord = c;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut r = rng::rng_from(seed);
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn quadratic_loss_matches_to_1e6() {
        // loss = 0.5 ||x||^2
        let x = random_tensor(1, 6, 3);
        let cfg = GradCheckConfig {
            tolerance: 1e-6,
            coords_per_tensor: 6,
            ..Default::default()
        };
        let report = grad_check(
            &[x],
            |tape, vars| {
                let sq = tape.mul_rowvec(vars[0], vars[0])?;
                let m = tape.mean_axis(sq, 1)?;
                tape.scale(m, 3.0) // 0.5 * 6 * mean
            },
            &cfg,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert_eq!(report.coords_checked, 6);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        // One composite touching each differentiable op; reduce to a scalar
        // by dotting with a fixed vector so all coordinates matter.
        let x = random_tensor(4, 8, 11);
        let w = random_tensor(8, 8, 12);
        let b = random_tensor(1, 8, 13);
        let g = random_tensor(1, 8, 14);
        let probe = random_tensor(4, 8, 15);
        let mask = random_tensor(4, 8, 16).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let cfg = GradCheckConfig {
            coords_per_tensor: 12,
            ..Default::default()
        };
        let report = grad_check(
            &[x, w, b, g, probe],
            move |tape, vars| {
                let (x, w, b, g, probe) = (vars[0], vars[1], vars[2], vars[3], vars[4]);
                let h = tape.matmul(x, w)?;
                let h = tape.add_rowvec(h, b)?;
                let h = tape.gelu(h)?;
                let h = tape.layer_norm(h, 1e-5)?;
                let h = tape.mul_rowvec(h, g)?;
                let h = tape.attention_core(h, h, h, 2)?;
                let h = tape.add(h, x)?;
                let h = tape.mul_mask(h, mask.clone())?;
                let h = tape.softmax(h)?;
                let picked = tape.gather_rows(h, vec![0, 2, 2, 3])?;
                let sliced = tape.narrow_rows(picked, 1, 3)?;
                let joined = tape.concat_rows(&[sliced, picked])?;
                let normed = tape.l2_normalize_rows(joined)?;
                let sims = tape.matmul_nt(normed, probe)?;
                let sims = tape.scale(sims, 1.7)?;
                let ce = tape.softmax_cross_entropy(sims, vec![0, 1, 2, 3, 0, 1, 2])?;
                let col = tape.mean_axis(normed, 0)?;
                let colmean = tape.mean_axis(col, 1)?;
                tape.add(ce, colmean)
            },
            &cfg,
        )
        .unwrap();
        assert!(
            report.passed(),
            "max rel err {} at param {} coord {}",
            report.max_rel_err,
            report.worst_param,
            report.worst_coord
        );
    }

    #[test]
    fn frozen_inputs_are_not_checked_or_differentiated() {
        // A constant folded into the loss contributes no parameter entry;
        // grad_check only ever perturbs what it is given.
        let x = random_tensor(1, 4, 21);
        let frozen = random_tensor(4, 4, 22);
        let report = grad_check(
            &[x],
            move |tape, vars| {
                let c = tape.constant(frozen.clone());
                let y = tape.matmul(vars[0], c)?;
                let sq = tape.mul_rowvec(y, y)?;
                tape.mean_axis(sq, 1)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed());
        assert_eq!(report.coords_checked, 4);
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        use std::cell::Cell;
        let x = random_tensor(1, 2, 31);
        let counter = Cell::new(0.0f64);
        let err = grad_check(
            &[x],
            |tape, vars| {
                counter.set(counter.get() + 1.0);
                let drift = tape.constant(Tensor::row_vector(vec![counter.get(), 0.0]).unwrap());
                let y = tape.add(vars[0], drift)?;
                let sq = tape.mul_rowvec(y, y)?;
                tape.mean_axis(sq, 1)
            },
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, NumericsError::Determinism(_)));
    }
}
