//! Exactly rounded dot products.
//!
//! Every entry produced by [`super::mat_mul`] is the binary64 value nearest to
//! the exact real dot product (ties to even). The result therefore does not
//! depend on summation order, and scaling an operand by a power of two scales
//! the result by the same power of two. Both facts are what make masked Gram
//! products recover bit-exactly.
//!
//! The fast path is a compensated (double-double) dot product with a rigorous
//! a-priori error bound. When the bound cannot certify the rounding of the
//! compensated value, the sum is recomputed exactly with big integers.

use num_bigint::{BigInt, BigUint, Sign};

const SPLITTER: f64 = 134_217_729.0; // 2^27 + 1
const UNIT_ROUNDOFF: f64 = 1.0 / 9_007_199_254_740_992.0; // 2^-53
const LANES: usize = 4;

/// Largest magnitude for which Veltkamp splitting cannot overflow.
pub(crate) const SPLIT_LIMIT: f64 = 1.0e290;

#[inline(always)]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let z = s - a;
    (s, (a - (s - z)) + (b - z))
}

#[inline(always)]
pub(crate) fn split(a: f64) -> (f64, f64) {
    let c = SPLITTER * a;
    let hi = c - (c - a);
    (hi, a - hi)
}

/// Operand of a dot product with its Veltkamp split precomputed.
#[derive(Clone, Copy)]
pub(crate) struct SplitSlice<'a> {
    pub value: &'a [f64],
    pub hi: &'a [f64],
    pub lo: &'a [f64],
}

/// Splits every entry of `values`, returning the high and low halves.
pub(crate) fn split_all(values: &[f64]) -> (Vec<f64>, Vec<f64>) {
    values.iter().map(|&v| split(v)).unzip()
}

/// Exactly rounded dot product of two pre-split vectors of equal length.
///
/// Entries must satisfy `|v| <= SPLIT_LIMIT`; callers route larger inputs
/// to [`dot_exact_fallback`].
pub(crate) fn dot_exact(x: SplitSlice<'_>, y: SplitSlice<'_>) -> f64 {
    let n = x.value.len();
    debug_assert_eq!(n, y.value.len());

    let mut hi = [0.0f64; LANES];
    let mut comp = [0.0f64; LANES];
    let mut mag = [0.0f64; LANES];

    let body = n - n % LANES;
    let mut k = 0;
    while k < body {
        for lane in 0..LANES {
            let i = k + lane;
            let p = x.value[i] * y.value[i];
            let e = ((x.hi[i] * y.hi[i] - p) + x.hi[i] * y.lo[i] + x.lo[i] * y.hi[i])
                + x.lo[i] * y.lo[i];
            let (s, q) = two_sum(hi[lane], p);
            hi[lane] = s;
            comp[lane] += q + e;
            mag[lane] += p.abs();
        }
        k += LANES;
    }
    for i in body..n {
        let p = x.value[i] * y.value[i];
        let e =
            ((x.hi[i] * y.hi[i] - p) + x.hi[i] * y.lo[i] + x.lo[i] * y.hi[i]) + x.lo[i] * y.lo[i];
        let (s, q) = two_sum(hi[0], p);
        hi[0] = s;
        comp[0] += q + e;
        mag[0] += p.abs();
    }

    let mut total = hi[0];
    let mut correction = comp[0];
    for lane in 1..LANES {
        let (s, q) = two_sum(total, hi[lane]);
        total = s;
        correction += q + comp[lane];
    }
    let magnitude: f64 = mag.iter().sum();

    if magnitude == 0.0 {
        return 0.0;
    }
    match certify(total, correction, magnitude, n) {
        Some(v) => v,
        None => dot_exact_fallback(x.value.iter().copied().zip(y.value.iter().copied())),
    }
}

/// Returns `round(total + correction)` if the error bound proves it equals the
/// correctly rounded exact sum.
fn certify(total: f64, correction: f64, magnitude: f64, n: usize) -> Option<f64> {
    let (r, t) = two_sum(total, correction);
    if !r.is_finite() || r == 0.0 || !magnitude.is_finite() {
        return None;
    }
    let k = 2.0 * n as f64 + 16.0;
    let bound = 8.0 * k * k * UNIT_ROUNDOFF * UNIT_ROUNDOFF * magnitude
        + n as f64 * f64::from_bits(0x0170_0000_0000_0000); // ~2^-1000 underflow slack

    let a = r.abs();
    let bits = a.to_bits();
    if bits >= f64::MAX.to_bits() {
        return None;
    }
    let ulp = f64::from_bits(bits + 1) - a;
    let power_of_two = bits & ((1u64 << 52) - 1) == 0 && (bits >> 52) > 1;
    let gap = if power_of_two { ulp * 0.5 } else { ulp };
    let half = gap * 0.5;
    if (t.abs() + bound) * (1.0 + 4.0 * UNIT_ROUNDOFF) < half {
        Some(r)
    } else {
        None
    }
}

/// Splits a finite double into a signed integer mantissa and a binary exponent.
fn decompose(x: f64) -> (i64, i32) {
    let bits = x.to_bits();
    let exp_field = ((bits >> 52) & 0x7ff) as i32;
    let frac = (bits & ((1u64 << 52) - 1)) as i64;
    let (mant, exp) = if exp_field == 0 {
        (frac, -1074)
    } else {
        (frac | (1i64 << 52), exp_field - 1075)
    };
    if x.is_sign_negative() {
        (-mant, exp)
    } else {
        (mant, exp)
    }
}

/// Exact dot product via big-integer accumulation, rounded to nearest-even.
pub(crate) fn dot_exact_fallback(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    let mut terms: Vec<(i128, i32)> = Vec::new();
    for (a, b) in pairs {
        if a == 0.0 || b == 0.0 {
            continue;
        }
        if !a.is_finite() || !b.is_finite() {
            return a * b + f64::NAN;
        }
        let (ma, ea) = decompose(a);
        let (mb, eb) = decompose(b);
        terms.push((ma as i128 * mb as i128, ea + eb));
    }
    let Some(e_min) = terms.iter().map(|&(_, e)| e).min() else {
        return 0.0;
    };
    let mut acc = BigInt::from(0);
    for (m, e) in terms {
        acc += BigInt::from(m) << ((e - e_min) as usize);
    }
    round_scaled(&acc, e_min)
}

/// Rounds `n * 2^exp` to the nearest binary64, ties to even.
fn round_scaled(n: &BigInt, exp: i32) -> f64 {
    if n.sign() == Sign::NoSign {
        return 0.0;
    }
    let negative = n.sign() == Sign::Minus;
    let mag = n.magnitude();
    let bits = mag.bits() as i64;
    let top = exp as i64 + bits - 1;
    let lowest = (top - 52).max(-1074);
    let shift = lowest - exp as i64;

    let (q, qexp) = if shift <= 0 {
        // Exactly representable; at most 53 significant bits.
        (u64_of(mag), exp as i64)
    } else {
        let shift_u = shift as usize;
        let q = mag >> shift_u;
        let rem = mag - (&q << shift_u);
        let half = BigUint::from(1u8) << (shift_u - 1);
        let mut q = u64_of(&q);
        if rem > half || (rem == half && q & 1 == 1) {
            q += 1;
        }
        (q, lowest)
    };
    let v = compose(q, qexp);
    if negative {
        -v
    } else {
        v
    }
}

fn u64_of(n: &BigUint) -> u64 {
    n.iter_u64_digits().next().unwrap_or(0)
}

/// Builds `q * 2^exp`, which the caller guarantees is representable
/// (or overflows to infinity).
fn compose(mut q: u64, mut exp: i64) -> f64 {
    if q == 0 {
        return 0.0;
    }
    let lead = 63 - q.leading_zeros() as i64;
    // normalise to a 53-bit significand
    if lead < 52 {
        q <<= 52 - lead;
        exp -= 52 - lead;
    } else if lead > 52 {
        // only reachable for q == 2^53 after rounding up
        let s = lead - 52;
        q >>= s;
        exp += s;
    }
    let unbiased = exp + 52;
    if unbiased > 1023 {
        return f64::INFINITY;
    }
    if unbiased >= -1022 {
        let e = (unbiased + 1023) as u64;
        f64::from_bits((e << 52) | (q & ((1u64 << 52) - 1)))
    } else {
        let s = (-1074 - exp) as u32;
        f64::from_bits(q >> s)
    }
}
