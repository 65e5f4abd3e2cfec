use super::DenseMatrix;
use crate::error::{Error, Result};

fn check_bijection(perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return Err(Error::invalid(format!("{perm:?} is not a permutation")));
        }
        seen[p] = true;
    }
    Ok(())
}

fn inverse_of(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Signed permutation matrix `P(i, j) = signs[i] * [perm[i] == j]`.
///
/// Orthogonal, so `P^-1 = P^T`. Indices are zero-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedPermutation {
    perm: Vec<usize>,
    signs: Vec<i8>,
}

impl SignedPermutation {
    pub fn new(perm: Vec<usize>, signs: Vec<i8>) -> Result<Self> {
        if perm.is_empty() {
            return Err(Error::invalid("signed permutation must have positive size"));
        }
        if perm.len() != signs.len() {
            return Err(Error::dim(format!(
                "permutation of size {} with {} signs",
                perm.len(),
                signs.len()
            )));
        }
        check_bijection(&perm)?;
        if let Some(s) = signs.iter().find(|&&s| s != 1 && s != -1) {
            return Err(Error::invalid(format!("sign {s} is not +1 or -1")));
        }
        Ok(SignedPermutation { perm, signs })
    }

    pub fn identity(m: usize) -> Self {
        SignedPermutation {
            perm: (0..m).collect(),
            signs: vec![1; m],
        }
    }

    pub fn size(&self) -> usize {
        self.perm.len()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let m = self.size();
        let mut d = DenseMatrix::zeros(m, m);
        for i in 0..m {
            d.data[i * m + self.perm[i]] = f64::from(self.signs[i]);
        }
        d
    }

    /// `P * a`: row `i` of the result is `signs[i] * a[perm[i], :]`.
    pub fn apply_left(&self, a: &DenseMatrix) -> Result<DenseMatrix> {
        if a.rows != self.size() {
            return Err(Error::dim(format!(
                "P of size {} cannot left-multiply {}x{}",
                self.size(),
                a.rows,
                a.cols
            )));
        }
        let mut out = Vec::with_capacity(a.data.len());
        for (i, &src) in self.perm.iter().enumerate() {
            let s = f64::from(self.signs[i]);
            out.extend(a.row(src).iter().map(|&v| s * v));
        }
        Ok(DenseMatrix::from_raw(a.rows, a.cols, out))
    }

    /// `a * P`: column `perm[i]` of the result is `signs[i] * a[:, i]`.
    pub fn apply_right(&self, a: &DenseMatrix) -> Result<DenseMatrix> {
        if a.cols != self.size() {
            return Err(Error::dim(format!(
                "P of size {} cannot right-multiply {}x{}",
                self.size(),
                a.rows,
                a.cols
            )));
        }
        let c = a.cols;
        let mut out = vec![0.0; a.data.len()];
        for r in 0..a.rows {
            let src = a.row(r);
            let dst = &mut out[r * c..(r + 1) * c];
            for i in 0..c {
                dst[self.perm[i]] = f64::from(self.signs[i]) * src[i];
            }
        }
        Ok(DenseMatrix::from_raw(a.rows, c, out))
    }

    /// `P^T`, which is also `P^-1`.
    pub fn transpose(&self) -> Self {
        let inv = inverse_of(&self.perm);
        let signs = inv.iter().map(|&i| self.signs[i]).collect();
        SignedPermutation { perm: inv, signs }
    }
}

/// Scaled permutation matrix `Q(i, j) = scales[i] * [perm[i] == j]` with
/// nonzero integer scales. Indices are zero-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaledPermutation {
    perm: Vec<usize>,
    scales: Vec<i64>,
}

impl ScaledPermutation {
    pub fn new(perm: Vec<usize>, scales: Vec<i64>) -> Result<Self> {
        if perm.is_empty() {
            return Err(Error::invalid("scaled permutation must have positive size"));
        }
        if perm.len() != scales.len() {
            return Err(Error::dim(format!(
                "permutation of size {} with {} scales",
                perm.len(),
                scales.len()
            )));
        }
        check_bijection(&perm)?;
        if scales.contains(&0) {
            return Err(Error::invalid("scales must be nonzero"));
        }
        if let Some(s) = scales.iter().find(|s| s.unsigned_abs() > 1 << 52) {
            return Err(Error::invalid(format!(
                "scale {s} is not exactly representable"
            )));
        }
        Ok(ScaledPermutation { perm, scales })
    }

    pub fn identity(n: usize) -> Self {
        ScaledPermutation {
            perm: (0..n).collect(),
            scales: vec![1; n],
        }
    }

    pub fn size(&self) -> usize {
        self.perm.len()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn scales(&self) -> &[i64] {
        &self.scales
    }

    fn scale(&self, i: usize) -> f64 {
        self.scales[i] as f64
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let n = self.size();
        let mut d = DenseMatrix::zeros(n, n);
        for i in 0..n {
            d.data[i * n + self.perm[i]] = self.scale(i);
        }
        d
    }

    /// Dense `Q^-1`: entry `(perm[i], i)` is `1 / scales[i]`.
    pub fn inverse_dense(&self) -> DenseMatrix {
        let n = self.size();
        let mut d = DenseMatrix::zeros(n, n);
        for i in 0..n {
            d.data[self.perm[i] * n + i] = 1.0 / self.scale(i);
        }
        d
    }

    fn check_square(&self, m: &DenseMatrix, what: &str) -> Result<()> {
        if !m.is_square() || m.rows != self.size() {
            return Err(Error::dim(format!(
                "{what} needs a {n}x{n} matrix, got {}x{}",
                m.rows,
                m.cols,
                n = self.size()
            )));
        }
        Ok(())
    }

    /// `Q * a`: row `i` of the result is `scales[i] * a[perm[i], :]`.
    pub fn apply_left(&self, a: &DenseMatrix) -> Result<DenseMatrix> {
        if a.rows != self.size() {
            return Err(Error::dim(format!(
                "Q of size {} cannot left-multiply {}x{}",
                self.size(),
                a.rows,
                a.cols
            )));
        }
        let mut out = Vec::with_capacity(a.data.len());
        for (i, &src) in self.perm.iter().enumerate() {
            let s = self.scale(i);
            out.extend(a.row(src).iter().map(|&v| s * v));
        }
        DenseMatrix::from_computed(a.rows, a.cols, out, "scaled row permutation")
    }

    /// `a * Q`: column `perm[i]` of the result is `scales[i] * a[:, i]`.
    pub fn apply_right(&self, a: &DenseMatrix) -> Result<DenseMatrix> {
        if a.cols != self.size() {
            return Err(Error::dim(format!(
                "Q of size {} cannot right-multiply {}x{}",
                self.size(),
                a.rows,
                a.cols
            )));
        }
        let c = a.cols;
        let mut out = vec![0.0; a.data.len()];
        for r in 0..a.rows {
            let src = a.row(r);
            let dst = &mut out[r * c..(r + 1) * c];
            for i in 0..c {
                dst[self.perm[i]] = self.scale(i) * src[i];
            }
        }
        DenseMatrix::from_computed(a.rows, c, out, "scaled column permutation")
    }

    /// `Q^T * m * Q`: entry `(perm[i], perm[j])` is `scales[i] * m[i, j] * scales[j]`.
    pub fn conjugate(&self, m: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_square(m, "conjugation")?;
        let n = self.size();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let si = self.scale(i);
            let row = m.row(i);
            let dst = self.perm[i] * n;
            for j in 0..n {
                out[dst + self.perm[j]] = (si * row[j]) * self.scale(j);
            }
        }
        DenseMatrix::from_computed(n, n, out, "conjugation")
    }

    /// `(Q^T)^-1 * m * Q^-1`: entry `(i, j)` is `m[perm[i], perm[j]] / scales[i] / scales[j]`.
    pub fn unconjugate(&self, m: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_square(m, "unconjugation")?;
        let n = self.size();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let si = self.scale(i);
            let src = m.row(self.perm[i]);
            let dst = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                dst[j] = (src[self.perm[j]] / si) / self.scale(j);
            }
        }
        DenseMatrix::from_computed(n, n, out, "unconjugation")
    }
}
