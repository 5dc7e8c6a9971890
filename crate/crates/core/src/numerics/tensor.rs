//! Row-major dense matrices. Sequences are `len x width` matrices, single
//! vectors are `1 x width`, loss scalars are `1 x 1`.

use std::fmt;
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::{NumericsError, Result};

/// Scalar type the engine is generic over. `f32` is the storage type used by
/// training and checkpoints; `f64` exists for the gradient verifier.
pub trait Element:
    Float + num_traits::NumAssignOps + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Element for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<E = f32> {
    rows: usize,
    cols: usize,
    data: Vec<E>,
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<E: Element> Tensor<E> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![E::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: E) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<E>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(NumericsError::Dimension {
                op: "from_vec",
                detail: format!("{}x{} incompatible with {} values", rows, cols, data.len()),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<E>]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(NumericsError::Dimension {
                op: "from_rows",
                detail: "no rows".into(),
            });
        }
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(NumericsError::Dimension {
                    op: "from_rows",
                    detail: "ragged rows".into(),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::from_vec(r, c, data)
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn row_vector(data: Vec<E>) -> Result<Self> {
        let n = data.len();
        Tensor::from_vec(1, n, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[E] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[E] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [E] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> E {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: E) {
        self.data[i * self.cols + j] = v;
    }

    /// The single value of a `1 x 1` tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// True when every entry is finite. Multiplying by zero maps finite
    /// values to zero and NaN/Inf to NaN, so a lane-wise accumulate stays
    /// vectorized instead of short-circuiting per element.
    pub fn is_finite(&self) -> bool {
        const LANES: usize = 8;
        let mut acc = [E::zero(); LANES];
        let mut chunks = self.data.chunks_exact(LANES);
        for c in &mut chunks {
            for l in 0..LANES {
                acc[l] += c[l] * E::zero();
            }
        }
        let mut bad = E::zero();
        for &x in chunks.remainder() {
            bad += x * E::zero();
        }
        for a in acc {
            bad += a;
        }
        bad == E::zero()
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Tensor<E> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| F::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn transposed(&self) -> Tensor<E> {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self += alpha * other`, shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor<E>, alpha: E) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn squared_norm(&self) -> E {
        dot(&self.data, &self.data)
    }

    /// Euclidean norm of row `i`.
    pub fn row_norm(&self, i: usize) -> E {
        self.row(i).iter().map(|&v| v * v).sum::<E>().sqrt()
    }

    /// Mean of every entry.
    pub fn mean_all(&self) -> E {
        let n = E::from_f64(self.data.len() as f64);
        self.data.iter().copied().sum::<E>() / n
    }

    /// `C = A B`. Cache-friendly i-k-j loop; row-parallel when the work is
    /// large and a thread pool is available.
    pub fn matmul(&self, b: &Tensor<E>) -> Result<Tensor<E>> {
        if self.cols != b.rows {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: b.shape(),
            });
        }
        let mut out = Tensor::zeros(self.rows, b.cols);
        let work = self.rows * self.cols * b.cols;
        if parallel(work, self.rows) {
            use rayon::prelude::*;
            out.data
                .par_chunks_mut(b.cols)
                .enumerate()
                .for_each(|(i, crow)| matmul_row(self.row(i), b, crow));
        } else {
            for i in 0..self.rows {
                matmul_row(self.row(i), b, out.row_mut(i));
            }
        }
        Ok(out)
    }

    /// `C = A B^T`: rows of the output are dot products of rows of `A` with
    /// rows of `B` (similarity matrices, attention scores).
    pub fn matmul_nt(&self, b: &Tensor<E>) -> Result<Tensor<E>> {
        if self.cols != b.cols {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape(),
                rhs: b.shape(),
            });
        }
        let mut out = Tensor::zeros(self.rows, b.rows);
        let work = self.rows * self.cols * b.rows;
        if parallel(work, self.rows) {
            use rayon::prelude::*;
            out.data
                .par_chunks_mut(b.rows)
                .enumerate()
                .for_each(|(i, crow)| {
                    let arow = self.row(i);
                    for (j, cj) in crow.iter_mut().enumerate() {
                        *cj = dot(arow, b.row(j));
                    }
                });
        } else {
            for i in 0..self.rows {
                let arow = self.row(i);
                for j in 0..b.rows {
                    out.data[i * b.rows + j] = dot(arow, b.row(j));
                }
            }
        }
        Ok(out)
    }

    /// `C = A^T B` (gradient of matmul w.r.t. its right operand).
    pub fn matmul_tn(&self, b: &Tensor<E>) -> Result<Tensor<E>> {
        if self.rows != b.rows {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul_tn",
                lhs: self.shape(),
                rhs: b.shape(),
            });
        }
        let mut out = Tensor::zeros(self.cols, b.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = b.row(k);
            for (i, &aki) in arow.iter().enumerate() {
                let crow = out.row_mut(i);
                for (cj, &bj) in crow.iter_mut().zip(brow) {
                    *cj += aki * bj;
                }
            }
        }
        Ok(out)
    }
}

#[inline]
fn matmul_row<E: Element>(arow: &[E], b: &Tensor<E>, crow: &mut [E]) {
    for (k, &aik) in arow.iter().enumerate() {
        let brow = b.row(k);
        for (cj, &bj) in crow.iter_mut().zip(brow) {
            *cj += aik * bj;
        }
    }
}

/// Dot product with eight independent accumulators so the reduction
/// vectorizes (a plain float sum is order-constrained and stays scalar).
#[inline]
pub(crate) fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 8;
    let mut acc = [E::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = E::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    let mut total = tail;
    for a in acc {
        total += a;
    }
    total
}

/// Row-parallel dispatch is worth it only for large ops on a multi-thread
/// pool; tiny per-sample attention blocks stay sequential.
#[inline]
fn parallel(work: usize, rows: usize) -> bool {
    rows > 1 && work >= 1 << 18 && rayon::current_num_threads() > 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_returns_input() {
        let a = Tensor::from_vec(3, 3, vec![2.0f32, -1.0, 0.5, 3.0, 4.0, -2.0, 0.0, 1.0, 7.0])
            .unwrap();
        let mut eye = Tensor::zeros(3, 3);
        for i in 0..3 {
            eye.set(i, i, 1.0);
        }
        let out = eye.matmul(&a).unwrap();
        assert_eq!(out, a);
        let out2 = a.matmul(&eye).unwrap();
        assert_eq!(out2, a);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        let c_nt = a.matmul_nt(&b.transposed()).unwrap();
        let c_tn = a.transposed().matmul_tn(&b).unwrap();
        assert_eq!(c, c_nt);
        assert_eq!(c, c_tn);
        assert_eq!(c.shape(), [2, 2]);
        assert_eq!(c.get(0, 0), 58.0);
        assert_eq!(c.get(1, 1), 154.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor::<f32>::zeros(2, 3);
        let b = Tensor::<f32>::zeros(2, 3);
        assert!(matches!(
            a.matmul(&b),
            Err(NumericsError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn zero_dimensions_rejected() {
        assert!(Tensor::<f32>::from_vec(0, 3, vec![]).is_err());
        assert!(Tensor::<f32>::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn cast_round_trips_f32_exactly() {
        let a = Tensor::from_vec(1, 3, vec![0.1f32, -2.5, 3.75]).unwrap();
        let b: Tensor<f64> = a.cast();
        let c: Tensor<f32> = b.cast();
        assert_eq!(a, c);
    }
}
