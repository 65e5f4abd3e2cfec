//! Dense row-major matrices and the structured permutation products used for
//! masking.

mod exact;
mod lu;
mod perm;

use std::fmt;
use std::io::{Read, Write};
use std::ops::Index;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, ProtocolErrorKind, Result};

pub use lu::{dense_inverse, dense_inverse_counted, LuDecomposition, SINGULAR_PIVOT_THRESHOLD};
pub use perm::{ScaledPermutation, SignedPermutation};

/// Row-major matrix of finite `f64` values with positive dimensions.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dim(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        let expected = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::dim(format!("{rows}x{cols} overflows")))?;
        if data.len() != expected {
            return Err(Error::dim(format!(
                "{rows}x{cols} matrix needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "entry ({}, {}) is not finite",
                pos / cols,
                pos % cols
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Builds a matrix from row slices of equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// # Panics
    /// If either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// # Panics
    /// If `n` is zero.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// The `rows x cols` matrix with ones on the leading diagonal.
    pub fn identity_padded(rows: usize, cols: usize) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows.min(cols) {
            m.data[i * cols + i] = 1.0;
        }
        m
    }

    pub fn diagonal(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(Error::dim("empty diagonal"));
        }
        let mut data = vec![0.0; n * n];
        for (i, &v) in values.iter().enumerate() {
            data[i * n + i] = v;
        }
        Self::new(n, n, data)
    }

    /// Entries drawn i.i.d. uniform on `[-1, 1]`.
    pub fn random_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(rows, cols);
        for v in &mut m.data {
            *v = rng.random_range(-1.0..=1.0);
        }
        m
    }

    /// # Panics
    /// If either dimension is zero or `f` returns a non-finite value.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = f(i, j);
                assert!(v.is_finite(), "non-finite entry at ({i}, {j})");
                m.data[i * cols + j] = v;
            }
        }
        m
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        DenseMatrix { rows, cols, data }
    }

    /// Wraps the output of an arithmetic step, rejecting overflow.
    pub(crate) fn from_computed(
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        op: &'static str,
    ) -> Result<Self> {
        if data.iter().all(|v| v.is_finite()) {
            Ok(Self::from_raw(rows, cols, data))
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        (i < self.rows && j < self.cols).then(|| self.data[i * self.cols + j])
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.data[i * self.cols + j])
            .collect()
    }

    /// Returns a copy with entry `(i, j)` replaced.
    pub fn with_entry(&self, i: usize, j: usize, value: f64) -> Result<Self> {
        if i >= self.rows || j >= self.cols {
            return Err(Error::dim(format!(
                "index ({i}, {j}) outside {}x{}",
                self.rows, self.cols
            )));
        }
        if !value.is_finite() {
            return Err(Error::invalid("entry must be finite"));
        }
        let mut out = self.clone();
        out.data[i * self.cols + j] = value;
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows, self.cols);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::from_raw(c, r, out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// `||self - other||_F / ||other||_F`.
    pub fn relative_frobenius_distance(&self, other: &DenseMatrix) -> Result<f64> {
        check_same_shape(self, other)?;
        let diff: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm = other.frobenius_norm();
        Ok(if norm == 0.0 { diff } else { diff / norm })
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<Self> {
        check_same_shape(self, other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Self::from_computed(self.rows, self.cols, data, "add")
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<Self> {
        check_same_shape(self, other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Self::from_computed(self.rows, self.cols, data, "sub")
    }

    /// `self + shift * I` for a square matrix.
    pub fn add_diagonal(&self, shift: f64) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::dim(format!(
                "diagonal shift needs a square matrix, got {}x{}",
                self.rows, self.cols
            )));
        }
        let mut data = self.data.clone();
        for i in 0..self.rows {
            data[i * self.cols + i] += shift;
        }
        Self::from_computed(self.rows, self.cols, data, "add_diagonal")
    }

    /// `[self | other]`.
    pub fn hstack(&self, other: &DenseMatrix) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::dim(format!(
                "horizontal join needs equal row counts, got {} and {}",
                self.rows, other.rows
            )));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Self::from_raw(self.rows, cols, data))
    }

    /// Applies `f` entrywise.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self::from_computed(self.rows, self.cols, data, "map")
    }

    /// Serialized size in bytes.
    pub fn encoded_len(&self) -> usize {
        16 + 8 * self.data.len()
    }

    /// `rows: u64 LE`, `cols: u64 LE`, then row-major `f64 LE` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses exactly one serialized matrix occupying all of `bytes`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let malformed = |d: String| Error::protocol(ProtocolErrorKind::MalformedPayload, d);
        if bytes.len() < 16 {
            return Err(malformed(format!(
                "matrix header needs 16 bytes, got {}",
                bytes.len()
            )));
        }
        let rows = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
        let cols = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let count = rows
            .checked_mul(cols)
            .and_then(|c| c.checked_mul(8))
            .and_then(|c| c.checked_add(16))
            .ok_or_else(|| malformed(format!("{rows}x{cols} overflows")))?;
        if count != bytes.len() as u64 {
            return Err(malformed(format!(
                "{rows}x{cols} matrix needs {count} bytes, got {}",
                bytes.len()
            )));
        }
        let data: Vec<f64> = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(rows as usize, cols as usize, data).map_err(|e| malformed(e.to_string()))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Reads one serialized matrix from a stream.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        let rows = u64::from_le_bytes(header[0..8].try_into().unwrap());
        let cols = u64::from_le_bytes(header[8..16].try_into().unwrap());
        let len = rows
            .checked_mul(cols)
            .filter(|&n| n > 0 && n <= (1 << 32))
            .ok_or_else(|| Error::invalid(format!("unreasonable matrix shape {rows}x{cols}")))?;
        let mut body = vec![0u8; len as usize * 8];
        r.read_exact(&mut body)?;
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(rows as usize, cols as usize, data)
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        assert!(
            i < self.rows && j < self.cols,
            "index ({i}, {j}) out of bounds"
        );
        &self.data[i * self.cols + j]
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

fn check_same_shape(a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "shapes differ: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(())
}

/// Number of scalar multiply-adds performed by [`mat_mul`] on these shapes.
pub fn mat_mul_ops(a: &DenseMatrix, b: &DenseMatrix) -> u64 {
    (a.rows * a.cols * b.cols) as u64
}

/// Classical product `a * b`.
///
/// Each entry is the correctly rounded value of the exact dot product, so the
/// result is independent of summation order and deterministic across thread
/// counts.
pub fn mat_mul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::dim(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let bt = b.transpose();
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];

    let splittable = a.max_abs() <= exact::SPLIT_LIMIT && bt.max_abs() <= exact::SPLIT_LIMIT;
    if splittable {
        let (ah, al) = exact::split_all(&a.data);
        let (bh, bl) = exact::split_all(&bt.data);
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            let r = i * k..(i + 1) * k;
            let x = exact::SplitSlice {
                value: &a.data[r.clone()],
                hi: &ah[r.clone()],
                lo: &al[r],
            };
            for (j, slot) in row.iter_mut().enumerate() {
                let c = j * k..(j + 1) * k;
                let y = exact::SplitSlice {
                    value: &bt.data[c.clone()],
                    hi: &bh[c.clone()],
                    lo: &bl[c],
                };
                *slot = exact::dot_exact(x, y);
            }
        });
    } else {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            let x = a.row(i);
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = exact::dot_exact_fallback(x.iter().copied().zip(bt.row(j).iter().copied()));
            }
        });
    }
    DenseMatrix::from_computed(m, n, out, "mat_mul")
}

/// `a^T * a`, computed by [`mat_mul`].
pub fn gram(a: &DenseMatrix) -> Result<DenseMatrix> {
    mat_mul(&a.transpose(), a)
}

/// Matrix-vector product `a * v`.
pub fn mat_vec(a: &DenseMatrix, v: &[f64]) -> Result<Vec<f64>> {
    if a.cols != v.len() {
        return Err(Error::dim(format!(
            "cannot multiply {}x{} by a vector of length {}",
            a.rows,
            a.cols,
            v.len()
        )));
    }
    Ok((0..a.rows)
        .map(|i| a.row(i).iter().zip(v).map(|(x, y)| x * y).sum())
        .collect())
}

/// `p * a` as a signed row permutation.
pub fn apply_signed_left(p: &SignedPermutation, a: &DenseMatrix) -> Result<DenseMatrix> {
    p.apply_left(a)
}

/// `a * q` as a scaled column permutation.
pub fn apply_scaled_right(a: &DenseMatrix, q: &ScaledPermutation) -> Result<DenseMatrix> {
    q.apply_right(a)
}

/// `q^T * m * q`.
pub fn conjugate_scaled(q: &ScaledPermutation, m: &DenseMatrix) -> Result<DenseMatrix> {
    q.conjugate(m)
}

/// `(q^T)^-1 * m * q^-1`.
pub fn unconjugate_scaled(q: &ScaledPermutation, m: &DenseMatrix) -> Result<DenseMatrix> {
    q.unconjugate(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn construction_validates() {
        assert!(matches!(
            DenseMatrix::new(0, 2, vec![]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            DenseMatrix::new(2, 2, vec![1.0; 3]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            DenseMatrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn mat_mul_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(mat_mul(&a, &DenseMatrix::identity(2)).unwrap(), a);
        assert_eq!(
            mat_mul(&a.transpose(), &a).unwrap(),
            m(&[&[10.0, 14.0], &[14.0, 20.0]])
        );
        assert_eq!(mat_mul(&m(&[&[2.0]]), &m(&[&[3.0]])).unwrap(), m(&[&[6.0]]));
        assert!(matches!(
            mat_mul(&a, &m(&[&[1.0, 2.0]])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn mat_mul_overflow_is_reported() {
        let a = m(&[&[1e300, 1e300]]);
        let b = m(&[&[1e300], &[1e300]]);
        assert!(matches!(mat_mul(&a, &b), Err(Error::NonFinite(_))));
    }

    #[test]
    fn mat_vec_examples() {
        assert_eq!(
            mat_vec(&DenseMatrix::identity(2), &[5.0, 7.0]).unwrap(),
            vec![5.0, 7.0]
        );
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(mat_vec(&a, &[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
        assert_eq!(
            mat_vec(&DenseMatrix::zeros(3, 2), &[4.0, -1.0]).unwrap(),
            vec![0.0; 3]
        );
        assert!(mat_vec(&a, &[1.0]).is_err());
    }

    #[test]
    fn serialization_layout() {
        let a = m(&[&[0.0]]);
        let bytes = a.to_bytes();
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[0..8], &1u64.to_le_bytes());
        assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
        assert_eq!(&bytes[16..], &[0u8; 8]);
        let b = m(&[&[1.5, -2.0], &[3.25, 4.0]]);
        assert_eq!(DenseMatrix::from_bytes(&b.to_bytes()).unwrap(), b);
        assert_eq!(DenseMatrix::read_from(&b.to_bytes()[..]).unwrap(), b);
        assert!(DenseMatrix::from_bytes(&b.to_bytes()[..30]).is_err());
    }

    #[test]
    fn hstack_and_diag() {
        let z = m(&[&[1.0], &[1.0]]);
        let h = m(&[&[0.0], &[0.0]]);
        assert_eq!(z.hstack(&h).unwrap(), m(&[&[1.0, 0.0], &[1.0, 0.0]]));
        assert!(z.hstack(&m(&[&[0.0]])).is_err());
        assert_eq!(
            DenseMatrix::zeros(2, 2).add_diagonal(1.0).unwrap(),
            DenseMatrix::identity(2)
        );
    }
}
