//! Dense real linear algebra: LU with partial pivoting, forward/adjoint
//! solves, and a differentiable condition-number surrogate.
//!
//! The condition surrogate is Frobenius-based, `kappa = ||A||_F * ||A^-1||_F`.
//! It upper-bounds the 2-norm condition number, is smooth wherever `A` is
//! nonsingular, and its gradient is available in closed form from the same
//! factorization used for solving.

use crate::{Error, Result};
use rayon::prelude::*;

/// Relative pivot threshold below which a matrix is declared singular.
pub const SINGULARITY_THRESHOLD: f64 = 1e-13;

/// Matrix sizes at or above this use rayon for row-parallel kernels.
const PAR_THRESHOLD: usize = 256;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from row-major entries, rejecting NaN/Inf and size
    /// mismatches.
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                entries.len()
            )));
        }
        if !entries.iter().all(|v| v.is_finite()) {
            return Err(Error::DimensionMismatch(
                "matrix entries must be finite".into(),
            ));
        }
        Ok(Self { rows, cols, entries })
    }

    /// Builds without the finiteness scan. For internal use on entries that
    /// are already known finite.
    pub(crate) fn from_raw(rows: usize, cols: usize, entries: Vec<f64>) -> Self {
        debug_assert_eq!(entries.len(), rows * cols);
        Self { rows, cols, entries }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.entries[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut entries = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                entries.push(f(i, j));
            }
        }
        Self::from_raw(rows, cols, entries)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.entries[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.entries[j * self.rows + i] = self.entries[i * self.cols + j];
            }
        }
        t
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "matvec: matrix has {} cols, vector has {}",
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| dot(self.row(i), v))
            .collect())
    }

    /// `self * other`, row-parallel with k-blocking for cache reuse.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (n, k_dim, m) = (self.rows, self.cols, other.cols);
        let mut out = DenseMatrix::zeros(n, m);
        let body = |(block_idx, c_block): (usize, &mut [f64])| {
            let i0 = block_idx * ROW_BLOCK;
            for kb in (0..k_dim).step_by(K_BLOCK) {
                let kb_end = (kb + K_BLOCK).min(k_dim);
                for (di, c_row) in c_block.chunks_mut(m).enumerate() {
                    let a_row = self.row(i0 + di);
                    for k in kb..kb_end {
                        let aik = a_row[k];
                        if aik != 0.0 {
                            axpy(c_row, aik, other.row(k));
                        }
                    }
                }
            }
        };
        if n >= PAR_THRESHOLD {
            out.entries
                .par_chunks_mut(ROW_BLOCK * m)
                .enumerate()
                .for_each(body);
        } else {
            out.entries
                .chunks_mut(ROW_BLOCK * m)
                .enumerate()
                .for_each(body);
        }
        Ok(out)
    }

    /// `self * other^T` via row dot products.
    pub fn matmul_nt(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch(format!(
                "matmul_nt: {}x{} times ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (n, m) = (self.rows, other.rows);
        let mut out = DenseMatrix::zeros(n, m);
        let body = |(i, c_row): (usize, &mut [f64])| {
            let a_row = self.row(i);
            for (j, c) in c_row.iter_mut().enumerate() {
                *c = dot(a_row, other.row(j));
            }
        };
        if n >= PAR_THRESHOLD {
            out.entries.par_chunks_mut(m).enumerate().for_each(body);
        } else {
            out.entries.chunks_mut(m).enumerate().for_each(body);
        }
        Ok(out)
    }
}

const ROW_BLOCK: usize = 32;
const K_BLOCK: usize = 64;

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Packed LU factorization with partial (row) pivoting: `P A = L U` with `L`
/// unit lower triangular and `U` upper triangular, both stored in place.
#[derive(Debug, Clone)]
pub struct LuFactorization {
    packed: DenseMatrix,
    /// `perm[i]` is the source row of `A` that ended up at position `i`.
    perm: Vec<usize>,
    /// Determinant sign of the permutation, `+1` or `-1`.
    sign: f64,
}

impl LuFactorization {
    pub fn order(&self) -> usize {
        self.packed.rows
    }

    pub fn packed(&self) -> &DenseMatrix {
        &self.packed
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn sign(&self) -> f64 {
        self.sign
    }
}

/// LU-factorizes a square matrix with partial pivoting. A pivot whose
/// magnitude falls below `1e-13 * max|A|` reports effective singularity.
pub fn lu_factor(a: &DenseMatrix) -> Result<LuFactorization> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "lu_factor needs a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    let n = a.rows;
    let tol = SINGULARITY_THRESHOLD * a.max_abs();
    let mut lu = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut sign = 1.0;

    for k in 0..n {
        // Pivot search down column k.
        let mut best = k;
        let mut best_abs = lu.at(k, k).abs();
        for i in (k + 1)..n {
            let v = lu.at(i, k).abs();
            if v > best_abs {
                best = i;
                best_abs = v;
            }
        }
        if best_abs <= tol {
            return Err(Error::SingularMatrix { pivot: k });
        }
        if best != k {
            swap_rows(&mut lu, k, best);
            perm.swap(k, best);
            sign = -sign;
        }
        let inv_pivot = 1.0 / lu.at(k, k);
        let cols = lu.cols;
        let (top, bottom) = lu.entries.split_at_mut((k + 1) * cols);
        let row_k = &top[k * cols..(k + 1) * cols];
        let update = |row_i: &mut [f64]| {
            let l = row_i[k] * inv_pivot;
            row_i[k] = l;
            if l != 0.0 {
                axpy(&mut row_i[k + 1..], -l, &row_k[k + 1..]);
            }
        };
        if n >= PAR_THRESHOLD && n - k > 64 {
            bottom.par_chunks_mut(cols).for_each(update);
        } else {
            bottom.chunks_mut(cols).for_each(update);
        }
    }
    Ok(LuFactorization { packed: lu, perm, sign })
}

fn swap_rows(m: &mut DenseMatrix, a: usize, b: usize) {
    let cols = m.cols;
    let (lo, hi) = (a.min(b), a.max(b));
    let (first, second) = m.entries.split_at_mut(hi * cols);
    first[lo * cols..(lo + 1) * cols].swap_with_slice(&mut second[..cols]);
}

/// Solves `A x = b` from a factorization of `A`.
pub fn lu_solve(f: &LuFactorization, b: &[f64]) -> Result<Vec<f64>> {
    let n = f.order();
    if b.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "lu_solve: system order {n}, rhs length {}",
            b.len()
        )));
    }
    // y = P b, then forward substitution with unit L, back substitution with U.
    let mut x: Vec<f64> = f.perm.iter().map(|&p| b[p]).collect();
    let lu = &f.packed;
    for i in 1..n {
        let s = dot(&lu.row(i)[..i], &x[..i]);
        x[i] -= s;
    }
    for i in (0..n).rev() {
        let s = dot(&lu.row(i)[i + 1..], &x[i + 1..]);
        x[i] = (x[i] - s) / lu.at(i, i);
    }
    Ok(x)
}

/// Solves the transposed system `A^T x = v` from a factorization of `A`.
///
/// With `P A = L U` we have `A^T = U^T L^T P`, so the solve runs a forward
/// substitution with `U^T`, a back substitution with `L^T`, and finally
/// un-permutes.
pub fn lu_solve_transpose(f: &LuFactorization, v: &[f64]) -> Result<Vec<f64>> {
    let n = f.order();
    if v.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "lu_solve_transpose: system order {n}, rhs length {}",
            v.len()
        )));
    }
    let lu = &f.packed;
    let mut w = v.to_vec();
    // U^T z = v (U^T is lower triangular with the U diagonal).
    for i in 0..n {
        let mut s = w[i];
        for j in 0..i {
            s -= lu.at(j, i) * w[j];
        }
        w[i] = s / lu.at(i, i);
    }
    // L^T y = z (L^T is unit upper triangular).
    for i in (0..n).rev() {
        let mut s = w[i];
        for j in (i + 1)..n {
            s -= lu.at(j, i) * w[j];
        }
        w[i] = s;
    }
    // x = P^T y.
    let mut x = vec![0.0; n];
    for (i, &p) in f.perm.iter().enumerate() {
        x[p] = w[i];
    }
    Ok(x)
}

/// Materializes `A^-1` from the factorization by blocked multi-RHS
/// substitution: column blocks run the forward/backward sweeps over
/// contiguous block rows, in parallel across blocks.
pub fn inverse(f: &LuFactorization) -> DenseMatrix {
    let n = f.order();
    let lu = &f.packed;
    let block = 48usize;
    let blocks: Vec<(usize, usize)> = (0..n)
        .step_by(block)
        .map(|c0| (c0, (c0 + block).min(n)))
        .collect();
    let solve_block = |&(c0, c1): &(usize, usize)| -> Vec<f64> {
        let bs = c1 - c0;
        // X = P I restricted to columns [c0, c1).
        let mut x = vec![0.0; n * bs];
        for (i, &p) in f.perm.iter().enumerate() {
            if p >= c0 && p < c1 {
                x[i * bs + (p - c0)] = 1.0;
            }
        }
        // Forward substitution with unit L.
        for i in 1..n {
            let (done, rest) = x.split_at_mut(i * bs);
            let xi = &mut rest[..bs];
            let row = lu.row(i);
            for k in 0..i {
                let l = row[k];
                if l != 0.0 {
                    axpy(xi, -l, &done[k * bs..(k + 1) * bs]);
                }
            }
        }
        // Back substitution with U.
        for i in (0..n).rev() {
            let (head, tail) = x.split_at_mut((i + 1) * bs);
            let xi = &mut head[i * bs..];
            let row = lu.row(i);
            for k in (i + 1)..n {
                let u = row[k];
                if u != 0.0 {
                    axpy(xi, -u, &tail[(k - i - 1) * bs..(k - i) * bs]);
                }
            }
            let inv_d = 1.0 / row[i];
            for v in xi.iter_mut() {
                *v *= inv_d;
            }
        }
        x
    };
    let results: Vec<Vec<f64>> = if n >= PAR_THRESHOLD {
        blocks.par_iter().map(solve_block).collect()
    } else {
        blocks.iter().map(solve_block).collect()
    };
    let mut inv = DenseMatrix::zeros(n, n);
    for ((c0, c1), x) in blocks.iter().zip(&results) {
        let bs = c1 - c0;
        for i in 0..n {
            inv.entries[i * n + c0..i * n + c1].copy_from_slice(&x[i * bs..(i + 1) * bs]);
        }
    }
    inv
}

/// Frobenius condition surrogate `kappa = ||A||_F * ||A^-1||_F`.
///
/// Returns `+inf` when `A` is effectively singular. For an `n x n` matrix the
/// value is at least `n`, and it upper-bounds the 2-norm condition number.
pub fn cond_surrogate(a: &DenseMatrix) -> f64 {
    match lu_factor(a) {
        Ok(f) => cond_surrogate_from(a, &f),
        Err(_) => f64::INFINITY,
    }
}

/// Condition surrogate from an existing factorization of `a`.
pub fn cond_surrogate_from(a: &DenseMatrix, f: &LuFactorization) -> f64 {
    a.frobenius_norm() * inverse(f).frobenius_norm()
}

/// Entrywise gradient of the condition surrogate with respect to `A`:
///
/// `d kappa / dA = (||A^-1||_F / ||A||_F) A - (||A||_F / ||A^-1||_F) A^-T A^-1 A^-T`.
pub fn cond_surrogate_grad(a: &DenseMatrix) -> Result<DenseMatrix> {
    let f = lu_factor(a)?;
    let inv = inverse(&f);
    cond_surrogate_grad_from(a, &inv)
}

/// Gradient of the condition surrogate given a precomputed inverse.
pub fn cond_surrogate_grad_from(a: &DenseMatrix, inv: &DenseMatrix) -> Result<DenseMatrix> {
    let norm_a = a.frobenius_norm();
    let norm_inv = inv.frobenius_norm();
    // A^-T A^-1 A^-T = (A^-1 A^-T A^-1)^T = ((A^-1 A^-T) A^-1)^T, and
    // A^-1 A^-T is symmetric, so build it with row dots.
    let sym = inv.matmul_nt(inv)?;
    let prod = sym.matmul(inv)?;
    let n = a.rows();
    let c_a = norm_inv / norm_a;
    let c_inv = norm_a / norm_inv;
    let mut g = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            g.set(i, j, c_a * a.at(i, j) - c_inv * prod.at(j, i));
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent brute-force oracle: Gaussian elimination with partial
    /// pivoting on an augmented system, no packing, no reuse.
    fn gaussian_elimination_oracle(a: &DenseMatrix, b: &[f64]) -> Vec<f64> {
        let n = a.rows();
        let mut aug: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut r = a.row(i).to_vec();
                r.push(b[i]);
                r
            })
            .collect();
        for k in 0..n {
            let pivot_row = (k..n)
                .max_by(|&p, &q| aug[p][k].abs().total_cmp(&aug[q][k].abs()))
                .unwrap();
            aug.swap(k, pivot_row);
            for i in (k + 1)..n {
                let factor = aug[i][k] / aug[k][k];
                for j in k..=n {
                    aug[i][j] -= factor * aug[k][j];
                }
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = aug[i][n];
            for j in (i + 1)..n {
                s -= aug[i][j] * x[j];
            }
            x[i] = s / aug[i][i];
        }
        x
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> DenseMatrix {
        DenseMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Diagonally dominant, hence comfortably well-conditioned.
    fn random_well_conditioned(rng: &mut ChaCha8Rng, n: usize) -> DenseMatrix {
        let mut m = random_matrix(rng, n);
        for i in 0..n {
            let v = m.at(i, i);
            m.set(i, i, v + n as f64);
        }
        m
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    /// Power-iteration estimate of the 2-norm condition number. The estimate
    /// never exceeds the true kappa_2, which itself never exceeds the
    /// Frobenius surrogate.
    fn kappa2_estimate(a: &DenseMatrix) -> f64 {
        let n = a.rows();
        let f = lu_factor(a).unwrap();
        let at = a.transpose();
        let mut v = vec![1.0; n];
        for _ in 0..200 {
            let w = at.matvec(&a.matvec(&v).unwrap()).unwrap();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            v = w.iter().map(|x| x / norm).collect();
        }
        let sigma_max = a
            .matvec(&v)
            .unwrap()
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let mut u = vec![1.0; n];
        for _ in 0..200 {
            let w = lu_solve(&f, &lu_solve_transpose(&f, &u).unwrap()).unwrap();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            u = w.iter().map(|x| x / norm).collect();
        }
        let sigma_min_inv = lu_solve_transpose(&f, &u)
            .unwrap()
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        sigma_max * sigma_min_inv
    }

    #[test]
    fn identity_factorization() {
        let a = DenseMatrix::identity(3);
        let f = lu_factor(&a).unwrap();
        assert_eq!(f.packed(), &a);
        assert_eq!(f.permutation(), &[0, 1, 2]);
        assert_eq!(f.sign(), 1.0);
    }

    #[test]
    fn permutation_matrix_pivots() {
        let a = DenseMatrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let f = lu_factor(&a).unwrap();
        assert_eq!(f.permutation(), &[1, 0]);
        assert_eq!(f.sign(), -1.0);
        let x = lu_solve(&f, &[2.0, 3.0]).unwrap();
        assert_eq!(x, vec![3.0, 2.0]);
    }

    #[test]
    fn repeated_columns_singular() {
        let a = DenseMatrix::new(2, 2, vec![0.7, 0.7, -1.3, -1.3]).unwrap();
        match lu_factor(&a) {
            Err(Error::SingularMatrix { pivot }) => assert_eq!(pivot, 1),
            other => panic!("expected SingularMatrix, got {other:?}"),
        }
    }

    #[test]
    fn zero_matrix_singular_at_first_pivot() {
        let a = DenseMatrix::zeros(3, 3);
        assert!(matches!(
            lu_factor(&a),
            Err(Error::SingularMatrix { pivot: 0 })
        ));
    }

    #[test]
    fn reconstruction_from_packed_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_well_conditioned(&mut rng, 12);
        let f = lu_factor(&a).unwrap();
        let n = a.rows();
        // (P A)[i][j] must equal (L U)[i][j].
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let mut lu_ij = 0.0;
                for k in 0..=i.min(j) {
                    let l = if k == i { 1.0 } else { f.packed().at(i, k) };
                    lu_ij += l * f.packed().at(k, j);
                }
                let pa_ij = a.at(f.permutation()[i], j);
                worst = worst.max((lu_ij - pa_ij).abs());
            }
        }
        assert!(worst <= 1e-10 * a.max_abs(), "worst {worst}");
    }

    #[test]
    fn solve_identity_and_diagonal() {
        let f = lu_factor(&DenseMatrix::identity(4)).unwrap();
        let b = [1.0, -2.0, 3.5, 0.25];
        assert_eq!(lu_solve(&f, &b).unwrap(), b.to_vec());

        let d = DenseMatrix::new(2, 2, vec![2.0, 0.0, 0.0, 4.0]).unwrap();
        let f = lu_factor(&d).unwrap();
        assert_eq!(lu_solve(&f, &[2.0, 8.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn solve_matches_gaussian_elimination_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let a = random_well_conditioned(&mut rng, 10);
            let b: Vec<f64> = (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let expected = gaussian_elimination_oracle(&a, &b);
            let got = lu_solve(&lu_factor(&a).unwrap(), &b).unwrap();
            assert!(max_abs_diff(&expected, &got) <= 1e-10);
        }
    }

    #[test]
    fn solve_rhs_length_mismatch() {
        let f = lu_factor(&DenseMatrix::identity(3)).unwrap();
        assert!(matches!(
            lu_solve(&f, &[1.0]),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(
            lu_solve_transpose(&f, &[1.0, 2.0]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn transpose_solve_identity_and_symmetric() {
        let f = lu_factor(&DenseMatrix::identity(3)).unwrap();
        let v = [0.5, -1.0, 2.0];
        assert_eq!(lu_solve_transpose(&f, &v).unwrap(), v.to_vec());

        let s = DenseMatrix::new(3, 3, vec![4.0, 1.0, 0.5, 1.0, 3.0, -1.0, 0.5, -1.0, 5.0]).unwrap();
        let f = lu_factor(&s).unwrap();
        let direct = lu_solve(&f, &v).unwrap();
        let transposed = lu_solve_transpose(&f, &v).unwrap();
        assert!(max_abs_diff(&direct, &transposed) <= 1e-12);
    }

    #[test]
    fn transpose_solve_multiply_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_well_conditioned(&mut rng, 8);
        let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lambda = lu_solve_transpose(&lu_factor(&a).unwrap(), &v).unwrap();
        let back = a.transpose().matvec(&lambda).unwrap();
        assert!(max_abs_diff(&back, &v) <= 1e-10);
    }

    #[test]
    fn transpose_solve_consistency_with_transposed_factorization() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..4 {
            let a = random_well_conditioned(&mut rng, 9);
            let v: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let via_transpose = lu_solve_transpose(&lu_factor(&a).unwrap(), &v).unwrap();
            let via_factored_t = lu_solve(&lu_factor(&a.transpose()).unwrap(), &v).unwrap();
            assert!(max_abs_diff(&via_transpose, &via_factored_t) <= 1e-12);
        }
    }

    #[test]
    fn cond_identity_equals_order() {
        for n in [1, 3, 8] {
            let k = cond_surrogate(&DenseMatrix::identity(n));
            assert!((k - n as f64).abs() <= 1e-12 * n as f64);
        }
    }

    #[test]
    fn cond_small_diagonal() {
        // diag(1, 1e-6): exact kappa_2 is 1e6; the Frobenius surrogate is
        // sqrt(1 + e^2) * sqrt(1 + e^-2), within a factor 2 of kappa_2.
        let a = DenseMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1e-6]).unwrap();
        let k = cond_surrogate(&a);
        assert!(k >= 1e6);
        assert!(k <= 2e6, "kappa {k}");
    }

    #[test]
    fn cond_singular_is_infinite() {
        let a = DenseMatrix::new(2, 2, vec![0.7, 0.7, -1.3, -1.3]).unwrap();
        assert!(cond_surrogate(&a).is_infinite());
    }

    #[test]
    fn cond_lower_bound_n_and_dominates_kappa2() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..5 {
            let n = rng.gen_range(3..9);
            let a = random_matrix(&mut rng, n);
            if lu_factor(&a).is_err() {
                continue;
            }
            let kappa = cond_surrogate(&a);
            assert!(kappa >= n as f64);
            assert!(kappa >= kappa2_estimate(&a) * (1.0 - 1e-9));
        }
    }

    fn fd_cond_grad(a: &DenseMatrix) -> DenseMatrix {
        let n = a.rows();
        let mut g = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let h = 1e-5 * (1.0 + a.at(i, j).abs());
                let mut plus = a.clone();
                plus.set(i, j, a.at(i, j) + h);
                let mut minus = a.clone();
                minus.set(i, j, a.at(i, j) - h);
                g.set(
                    i,
                    j,
                    (cond_surrogate(&plus) - cond_surrogate(&minus)) / (2.0 * h),
                );
            }
        }
        g
    }

    fn assert_grad_close(analytic: &DenseMatrix, fd: &DenseMatrix, rel: f64) {
        // Floor of 1.0 absorbs central-difference noise at flat points, where
        // the quotient eps*kappa/h dominates the true (zero) derivative.
        let scale = fd.max_abs().max(analytic.max_abs()).max(1.0);
        for i in 0..analytic.rows() {
            for j in 0..analytic.cols() {
                let diff = (analytic.at(i, j) - fd.at(i, j)).abs();
                assert!(
                    diff <= rel * scale,
                    "grad mismatch at ({i},{j}): analytic {} fd {}",
                    analytic.at(i, j),
                    fd.at(i, j)
                );
            }
        }
    }

    #[test]
    fn cond_grad_matches_fd_on_scaled_identity() {
        let a = DenseMatrix::new(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let g = cond_surrogate_grad(&a).unwrap();
        assert_grad_close(&g, &fd_cond_grad(&a), 1e-5);
    }

    #[test]
    fn cond_grad_symmetric_for_symmetric_input() {
        let a = DenseMatrix::identity(3);
        let g = cond_surrogate_grad(&a).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((g.at(i, j) - g.at(j, i)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cond_grad_matches_fd_on_random_5x5() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..3 {
            let a = random_well_conditioned(&mut rng, 5);
            let g = cond_surrogate_grad(&a).unwrap();
            assert_grad_close(&g, &fd_cond_grad(&a), 1e-4);
        }
    }

    #[test]
    fn cond_grad_rejects_singular() {
        let a = DenseMatrix::new(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            cond_surrogate_grad(&a),
            Err(Error::SingularMatrix { .. })
        ));
    }

    #[test]
    fn solve_residual_bound_on_random_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        for _ in 0..8 {
            let n = rng.gen_range(2..24);
            let a = random_matrix(&mut rng, n);
            let f = match lu_factor(&a) {
                Ok(f) => f,
                Err(_) => continue,
            };
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = lu_solve(&f, &b).unwrap();
            let residual = max_abs_diff(&a.matvec(&x).unwrap(), &b);
            let b_inf = b.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let bound = 64.0 * f64::EPSILON * cond_surrogate_from(&a, &f) * b_inf;
            assert!(residual <= bound, "residual {residual} bound {bound}");
        }
    }

    #[test]
    fn matmul_agrees_with_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let a = random_matrix(&mut rng, 13);
        let b = random_matrix(&mut rng, 13);
        let c = a.matmul(&b).unwrap();
        for i in 0..13 {
            for j in 0..13 {
                let mut s = 0.0;
                for k in 0..13 {
                    s += a.at(i, k) * b.at(k, j);
                }
                assert!((c.at(i, j) - s).abs() <= 1e-12);
            }
        }
        let cnt = a.matmul_nt(&b).unwrap();
        let cbt = a.matmul(&b.transpose()).unwrap();
        for i in 0..13 {
            for j in 0..13 {
                assert!((cnt.at(i, j) - cbt.at(i, j)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(DenseMatrix::new(2, 2, vec![1.0, 2.0, 3.0]).is_err());
        assert!(DenseMatrix::new(1, 2, vec![f64::NAN, 0.0]).is_err());
        assert!(matches!(
            lu_factor(&DenseMatrix::zeros(2, 3)),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
