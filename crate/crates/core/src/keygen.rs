//! Sampling of the masking keys `P` (signed permutation) and `Q` (scaled
//! permutation).
//!
//! Keys come from a seeded ChaCha20 stream. The generator is reproducible,
//! not cryptographically hardened: the masking argument is combinatorial and
//! the seed is the whole secret.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, FormatErrorKind, Result};
use crate::matrix::{ScaledPermutation, SignedPermutation};

pub const KEY_FILE_MAGIC: &[u8; 8] = b"PBLSKEY1";

/// How the nonzero integer scales of `Q` are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleMode {
    /// Uniform on `{1, ..., n}`.
    Paper,
    /// Uniform on `{1, 2, 4, ..., 2^ceil(log2 n)}`; masking and unmasking are
    /// then exact in binary64.
    #[default]
    Pow2,
}

impl ScaleMode {
    /// Number of distinct scale values available for a key of size `n`.
    pub fn choices(self, n: usize) -> usize {
        match self {
            ScaleMode::Paper => n,
            ScaleMode::Pow2 => ceil_log2(n) as usize + 1,
        }
    }

    /// Largest admissible scale for a key of size `n`.
    pub fn max_scale(self, n: usize) -> i64 {
        match self {
            ScaleMode::Paper => n as i64,
            ScaleMode::Pow2 => 1i64 << ceil_log2(n),
        }
    }

    fn sample<R: Rng>(self, n: usize, rng: &mut R) -> i64 {
        match self {
            ScaleMode::Paper => rng.random_range(1..=n as i64),
            ScaleMode::Pow2 => 1i64 << rng.random_range(0..=ceil_log2(n)),
        }
    }

    /// Position of `scale` in the ordered list of admissible values.
    fn index_of(self, scale: i64) -> usize {
        match self {
            ScaleMode::Paper => (scale - 1) as usize,
            ScaleMode::Pow2 => scale.trailing_zeros() as usize,
        }
    }
}

impl fmt::Display for ScaleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleMode::Paper => "paper",
            ScaleMode::Pow2 => "pow2",
        })
    }
}

impl FromStr for ScaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(ScaleMode::Paper),
            "pow2" => Ok(ScaleMode::Pow2),
            other => Err(Error::invalid(format!(
                "unknown scale mode {other:?} (expected paper|pow2)"
            ))),
        }
    }
}

fn ceil_log2(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}

/// The client's secret masking keys for one `m x n` input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskKeys {
    p: SignedPermutation,
    q: ScaledPermutation,
    seed: u64,
    scale_mode: ScaleMode,
}

impl MaskKeys {
    /// Assembles keys from parts, checking the scale bound of `scale_mode`.
    pub fn from_parts(
        p: SignedPermutation,
        q: ScaledPermutation,
        seed: u64,
        scale_mode: ScaleMode,
    ) -> Result<Self> {
        let n = q.size();
        let max = scale_mode.max_scale(n);
        if let Some(s) = q.scales().iter().find(|&&s| s.abs() > max) {
            return Err(Error::invalid(format!(
                "scale {s} exceeds {max} for {scale_mode} mode, n = {n}"
            )));
        }
        if scale_mode == ScaleMode::Pow2 {
            if let Some(s) = q.scales().iter().find(|&&s| s <= 0 || s.count_ones() != 1) {
                return Err(Error::invalid(format!("scale {s} is not a power of two")));
            }
        }
        Ok(MaskKeys {
            p,
            q,
            seed,
            scale_mode,
        })
    }

    /// Identity keys: masking becomes a no-op.
    pub fn identity(m: usize, n: usize) -> Self {
        MaskKeys {
            p: SignedPermutation::identity(m),
            q: ScaledPermutation::identity(n),
            seed: 0,
            scale_mode: ScaleMode::Pow2,
        }
    }

    pub fn p(&self) -> &SignedPermutation {
        &self.p
    }

    pub fn q(&self) -> &ScaledPermutation {
        &self.q
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scale_mode(&self) -> ScaleMode {
        self.scale_mode
    }

    /// `(m, n)`: the input shape these keys mask.
    pub fn shape(&self) -> (usize, usize) {
        (self.p.size(), self.q.size())
    }

    /// Writes the debug key record. The record holds the secret in the clear.
    pub fn export<W: Write>(&self, mut w: W) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(KEY_FILE_MAGIC);
        out.extend_from_slice(&(self.p.size() as u64).to_le_bytes());
        out.extend_from_slice(&(self.q.size() as u64).to_le_bytes());
        for &i in self.p.perm() {
            out.extend_from_slice(&(i as u64).to_le_bytes());
        }
        for &s in self.p.signs() {
            out.extend_from_slice(&i64::from(s).to_le_bytes());
        }
        for &i in self.q.perm() {
            out.extend_from_slice(&(i as u64).to_le_bytes());
        }
        for &a in self.q.scales() {
            out.extend_from_slice(&a.to_le_bytes());
        }
        w.write_all(&out)?;
        Ok(())
    }

    /// Reads a record written by [`MaskKeys::export`].
    pub fn import<R: Read>(mut r: R) -> Result<(SignedPermutation, ScaledPermutation)> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = ByteCursor {
            bytes: &bytes,
            pos: 0,
        };
        if cur.take(8)? != KEY_FILE_MAGIC {
            return Err(Error::format(
                FormatErrorKind::BadMagic,
                "not a PBLSKEY1 record",
            ));
        }
        let m = cur.u64()? as usize;
        let n = cur.u64()? as usize;
        let expected = 24 + 16 * (m as u128 + n as u128);
        if expected != bytes.len() as u128 {
            return Err(Error::format(
                FormatErrorKind::Truncated,
                format!(
                    "key record for m={m}, n={n} needs {expected} bytes, got {}",
                    bytes.len()
                ),
            ));
        }
        let perm1 = (0..m)
            .map(|_| cur.u64().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let signs = (0..m)
            .map(|_| cur.u64().map(|v| v as i64 as i8))
            .collect::<Result<Vec<_>>>()?;
        let perm2 = (0..n)
            .map(|_| cur.u64().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let scales = (0..n)
            .map(|_| cur.u64().map(|v| v as i64))
            .collect::<Result<Vec<_>>>()?;
        Ok((
            SignedPermutation::new(perm1, signs)?,
            ScaledPermutation::new(perm2, scales)?,
        ))
    }
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::format(FormatErrorKind::Truncated, "key record ends early"))?;
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Samples `P` (size `m`) and `Q` (size `n`) from `seed`.
///
/// Both permutations are uniform (Fisher-Yates), the signs of `P` are fair
/// coin flips and the scales of `Q` are independent of its permutation.
pub fn generate_keys(m: usize, n: usize, seed: u64, scale_mode: ScaleMode) -> Result<MaskKeys> {
    if m == 0 || n == 0 {
        return Err(Error::invalid(format!(
            "key dimensions must be positive, got m={m}, n={n}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let mut perm1: Vec<usize> = (0..m).collect();
    perm1.shuffle(&mut rng);
    let signs: Vec<i8> = (0..m)
        .map(|_| if rng.random::<bool>() { 1 } else { -1 })
        .collect();

    let mut perm2: Vec<usize> = (0..n).collect();
    perm2.shuffle(&mut rng);
    let scales: Vec<i64> = (0..n).map(|_| scale_mode.sample(n, &mut rng)).collect();

    Ok(MaskKeys {
        p: SignedPermutation::new(perm1, signs)?,
        q: ScaledPermutation::new(perm2, scales)?,
        seed,
        scale_mode,
    })
}

/// Which key matrix a census enumerates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CensusTarget {
    /// `P`: `2^m * m!` keys.
    Signed,
    /// `Q`: `choices^n * n!` keys for the given scale mode.
    Scaled(ScaleMode),
}

/// Empirical key frequencies and a chi-square test against uniformity.
#[derive(Debug, Clone)]
pub struct CensusReport {
    pub key_space: usize,
    pub samples: u64,
    pub counts: Vec<u64>,
    pub chi_square: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
}

impl CensusReport {
    pub fn unseen_keys(&self) -> usize {
        self.counts.iter().filter(|&&c| c == 0).count()
    }
}

pub const MAX_CENSUS_SIZE: usize = 6;
const MAX_CENSUS_KEY_SPACE: usize = 1 << 20;

fn factorial(n: usize) -> usize {
    (1..=n).product()
}

/// Lehmer-code rank of a permutation in `0..n!`.
fn permutation_rank(perm: &[usize]) -> usize {
    let n = perm.len();
    let mut rank = 0;
    for i in 0..n {
        let smaller = perm[i + 1..].iter().filter(|&&p| p < perm[i]).count();
        rank += smaller * factorial(n - 1 - i);
    }
    rank
}

/// Size of the key space for `target` at `size`.
pub fn key_space_size(target: CensusTarget, size: usize) -> Option<usize> {
    let base = match target {
        CensusTarget::Signed => 2usize,
        CensusTarget::Scaled(mode) => mode.choices(size),
    };
    base.checked_pow(size as u32)?.checked_mul(factorial(size))
}

fn key_index(target: CensusTarget, keys: &MaskKeys) -> usize {
    match target {
        CensusTarget::Signed => {
            let p = keys.p();
            let bits = p
                .signs()
                .iter()
                .enumerate()
                .fold(0usize, |acc, (i, &s)| acc | (usize::from(s < 0) << i));
            permutation_rank(p.perm()) * (1 << p.size()) + bits
        }
        CensusTarget::Scaled(mode) => {
            let q = keys.q();
            let base = mode.choices(q.size());
            let digits = q
                .scales()
                .iter()
                .rev()
                .fold(0usize, |acc, &s| acc * base + mode.index_of(s));
            permutation_rank(q.perm()) * base.pow(q.size() as u32) + digits
        }
    }
}

/// Samples `samples` keys of the given `size` (sample `i` uses seed
/// `seed + i`) and tabulates how often each key of the space appears.
pub fn key_space_census(
    target: CensusTarget,
    size: usize,
    samples: u64,
    seed: u64,
) -> Result<CensusReport> {
    if size == 0 || size > MAX_CENSUS_SIZE {
        return Err(Error::invalid(format!(
            "census size must be in 1..={MAX_CENSUS_SIZE}, got {size}"
        )));
    }
    if samples == 0 {
        return Err(Error::invalid("census needs at least one sample"));
    }
    let key_space = key_space_size(target, size)
        .filter(|&k| k <= MAX_CENSUS_KEY_SPACE)
        .ok_or_else(|| {
            Error::invalid(format!(
                "key space of {target:?} at size {size} is too large to enumerate"
            ))
        })?;
    let mode = match target {
        CensusTarget::Signed => ScaleMode::Pow2,
        CensusTarget::Scaled(mode) => mode,
    };

    let mut counts = vec![0u64; key_space];
    for i in 0..samples {
        let keys = generate_keys(size, size, seed.wrapping_add(i), mode)?;
        counts[key_index(target, &keys)] += 1;
    }

    let expected = samples as f64 / key_space as f64;
    let chi_square: f64 = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    let dof = key_space - 1;
    let p_value = if dof == 0 {
        1.0
    } else {
        ChiSquared::new(dof as f64)
            .map(|d| d.sf(chi_square))
            .map_err(|e| Error::invalid(e.to_string()))?
    };
    Ok(CensusReport {
        key_space,
        samples,
        counts,
        chi_square,
        degrees_of_freedom: dof,
        p_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{mat_mul, DenseMatrix};

    #[test]
    fn smallest_keys() {
        let k = generate_keys(1, 1, 99, ScaleMode::Paper).unwrap();
        assert_eq!(k.q().scales(), &[1]);
        assert_eq!(k.q().perm(), &[0]);
        assert!(k.p().signs()[0].abs() == 1);
        assert!(matches!(
            generate_keys(0, 3, 1, ScaleMode::Pow2),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_keys(7, 5, 1234, ScaleMode::Pow2).unwrap();
        let b = generate_keys(7, 5, 1234, ScaleMode::Pow2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_keys(7, 5, 1235, ScaleMode::Pow2).unwrap());
    }

    #[test]
    fn invariants_over_many_seeds() {
        for seed in 0..1000 {
            for mode in [ScaleMode::Paper, ScaleMode::Pow2] {
                let k = generate_keys(4, 4, seed, mode).unwrap();
                let p = k.p().to_dense();
                assert_eq!(
                    mat_mul(&p, &p.transpose()).unwrap(),
                    DenseMatrix::identity(4)
                );
                assert!(k
                    .q()
                    .scales()
                    .iter()
                    .all(|&s| s >= 1 && s <= mode.max_scale(4)));
                MaskKeys::from_parts(k.p().clone(), k.q().clone(), seed, mode).unwrap();
            }
        }
    }

    #[test]
    fn pow2_scales_cover_the_ceiling() {
        assert_eq!(ceil_log2(1), 0);
        assert_eq!(ceil_log2(3), 2);
        assert_eq!(ceil_log2(4), 2);
        assert_eq!(ceil_log2(5), 3);
        assert_eq!(ScaleMode::Pow2.max_scale(3), 4);
        assert_eq!(ScaleMode::Pow2.choices(3), 3);
    }

    #[test]
    fn from_parts_rejects_out_of_mode_scales() {
        let p = SignedPermutation::identity(2);
        let q = ScaledPermutation::new(vec![0, 1], vec![3, 1]).unwrap();
        assert!(MaskKeys::from_parts(p.clone(), q.clone(), 0, ScaleMode::Pow2).is_err());
        assert!(MaskKeys::from_parts(p, q, 0, ScaleMode::Paper).is_err());
    }

    #[test]
    fn census_counts_key_space() {
        assert_eq!(key_space_size(CensusTarget::Signed, 1), Some(2));
        assert_eq!(key_space_size(CensusTarget::Signed, 2), Some(8));
        assert_eq!(key_space_size(CensusTarget::Signed, 3), Some(48));
        assert_eq!(
            key_space_size(CensusTarget::Scaled(ScaleMode::Paper), 3),
            Some(27 * 6)
        );

        let r = key_space_census(CensusTarget::Signed, 1, 2000, 5).unwrap();
        assert_eq!(r.counts.len(), 2);
        assert!(r.counts.iter().all(|&c| (c as i64 - 1000).abs() < 150));

        let r = key_space_census(CensusTarget::Signed, 2, 8000, 5).unwrap();
        assert_eq!(r.key_space, 8);
        assert_eq!(r.unseen_keys(), 0);

        assert!(key_space_census(CensusTarget::Signed, 7, 10, 0).is_err());
        assert!(key_space_census(CensusTarget::Scaled(ScaleMode::Paper), 6, 10, 0).is_err());
    }

    #[test]
    fn scaled_census_is_uniform_at_size_two() {
        let r = key_space_census(CensusTarget::Scaled(ScaleMode::Paper), 2, 8000, 77).unwrap();
        assert_eq!(r.key_space, 8);
        assert!(r.p_value > 0.001, "p = {}", r.p_value);
    }

    #[test]
    fn permutation_ranks_are_a_bijection() {
        let mut seen = std::collections::HashSet::new();
        let mut perm = vec![0, 1, 2, 3];
        // enumerate by Heap's algorithm
        fn heap(k: usize, p: &mut Vec<usize>, out: &mut std::collections::HashSet<usize>) {
            if k == 1 {
                out.insert(permutation_rank(p));
                return;
            }
            heap(k - 1, p, out);
            for i in 0..k - 1 {
                if k.is_multiple_of(2) {
                    p.swap(i, k - 1);
                } else {
                    p.swap(0, k - 1);
                }
                heap(k - 1, p, out);
            }
        }
        heap(4, &mut perm, &mut seen);
        assert_eq!(seen.len(), 24);
        assert!(seen.iter().all(|&r| r < 24));
    }

    #[test]
    fn export_import_round_trip() {
        let k = generate_keys(5, 3, 8, ScaleMode::Paper).unwrap();
        let mut buf = Vec::new();
        k.export(&mut buf).unwrap();
        assert_eq!(&buf[..8], KEY_FILE_MAGIC);
        assert_eq!(buf.len(), 24 + 16 * 8);
        let (p, q) = MaskKeys::import(&buf[..]).unwrap();
        assert_eq!(&p, k.p());
        assert_eq!(&q, k.q());
        assert!(MaskKeys::import(&buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert_eq!(
            MaskKeys::import(&buf[..]).unwrap_err().format_kind(),
            Some(FormatErrorKind::BadMagic)
        );
    }
}
