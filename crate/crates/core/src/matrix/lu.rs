use rayon::prelude::*;

use super::DenseMatrix;
use crate::error::{Error, Result};

/// Pivots with absolute value below this are treated as zero.
pub const SINGULAR_PIVOT_THRESHOLD: f64 = 1e-300;

/// `PA = LU` with partial (row) pivoting, stored compactly.
#[derive(Debug, Clone)]
pub struct LuDecomposition {
    n: usize,
    lu: Vec<f64>,
    /// Row `i` of `PA` is row `perm[i]` of `A`.
    perm: Vec<usize>,
    ops: u64,
}

impl LuDecomposition {
    pub fn factor(m: &DenseMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::dim(format!(
                "LU needs a square matrix, got {}x{}",
                m.rows, m.cols
            )));
        }
        let n = m.rows;
        let mut lu = m.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut ops = 0u64;

        for k in 0..n {
            let (pivot_row, pivot_abs) =
                (k..n)
                    .map(|i| (i, lu[i * n + k].abs()))
                    .fold(
                        (k, -1.0),
                        |best, cur| if cur.1 > best.1 { cur } else { best },
                    );
            if pivot_abs.is_nan() || pivot_abs < SINGULAR_PIVOT_THRESHOLD {
                return Err(Error::SingularMatrix {
                    column: k,
                    pivot: pivot_abs,
                });
            }
            if pivot_row != k {
                for j in 0..n {
                    lu.swap(k * n + j, pivot_row * n + j);
                }
                perm.swap(k, pivot_row);
            }
            let pivot = lu[k * n + k];
            let (upper, lower) = lu.split_at_mut((k + 1) * n);
            let pivot_tail = &upper[k * n + k + 1..k * n + n];
            for row in lower.chunks_exact_mut(n) {
                let l = row[k] / pivot;
                row[k] = l;
                if l != 0.0 {
                    for (x, &u) in row[k + 1..].iter_mut().zip(pivot_tail) {
                        *x -= l * u;
                    }
                }
            }
            let rest = (n - k - 1) as u64;
            ops += rest * (rest + 1);
        }
        Ok(LuDecomposition { n, lu, perm, ops })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// Multiply-adds spent in the factorization.
    pub fn factor_ops(&self) -> u64 {
        self.ops
    }

    /// Ratio of the largest to the smallest pivot magnitude, a cheap lower
    /// estimate of the condition number.
    pub fn condition_estimate(&self) -> f64 {
        let pivots = (0..self.n).map(|k| self.lu[k * self.n + k].abs());
        let (lo, hi) = pivots.fold((f64::INFINITY, 0.0f64), |(lo, hi), p| {
            (lo.min(p), hi.max(p))
        });
        hi / lo
    }

    /// Solves `A x = b` in place. Returns the multiply-add count (`n^2`).
    pub fn solve_in_place(&self, b: &mut [f64]) -> Result<u64> {
        let n = self.n;
        if b.len() != n {
            return Err(Error::dim(format!(
                "right-hand side of length {} for size {n}",
                b.len()
            )));
        }
        let permuted: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        b.copy_from_slice(&permuted);
        self.substitute(b);
        Ok((n * n) as u64)
    }

    fn substitute(&self, x: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let row = &self.lu[i * n..i * n + i];
            let s: f64 = row.iter().zip(&x[..i]).map(|(l, v)| l * v).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let row = &self.lu[i * n..(i + 1) * n];
            let s: f64 = row[i + 1..]
                .iter()
                .zip(&x[i + 1..])
                .map(|(u, v)| u * v)
                .sum();
            x[i] = (x[i] - s) / row[i];
        }
    }

    /// Inverse via `n` triangular solves against the identity.
    /// Returns the inverse and the multiply-adds spent in the solves.
    pub fn inverse(&self) -> Result<(DenseMatrix, u64)> {
        let n = self.n;
        let columns: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|j| {
                let mut x: Vec<f64> = self
                    .perm
                    .iter()
                    .map(|&p| if p == j { 1.0 } else { 0.0 })
                    .collect();
                self.substitute(&mut x);
                x
            })
            .collect();
        let mut data = vec![0.0; n * n];
        for (j, col) in columns.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                data[i * n + j] = v;
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularMatrix {
                column: n,
                pivot: 0.0,
            });
        }
        Ok((DenseMatrix::from_raw(n, n, data), (n * n * n) as u64))
    }
}

/// `m^-1` by LU with partial pivoting.
pub fn dense_inverse(m: &DenseMatrix) -> Result<DenseMatrix> {
    dense_inverse_counted(m).map(|(inv, _)| inv)
}

/// Like [`dense_inverse`], also returning the multiply-add count.
pub fn dense_inverse_counted(m: &DenseMatrix) -> Result<(DenseMatrix, u64)> {
    let lu = LuDecomposition::factor(m)?;
    let (inv, solve_ops) = lu.inverse()?;
    Ok((inv, lu.factor_ops() + solve_ops))
}
