//! Order-independent exact accumulation of `f64` values.
//!
//! Deterministic execution requires that a sum over contributions produced by
//! different partitions yields bit-identical results no matter how the addend
//! set was grouped. Plain floating-point addition is not associative, so any
//! fixed summation *order* still depends on how partial sums were formed.
//! `ExactAcc` instead keeps the running sum in a wide fixed-point accumulator
//! covering the full `f64` exponent range; additions and merges are exact
//! integer operations, and a single correctly-rounded conversion back to
//! `f64` happens at the end. The rounded value is a function of the exact sum
//! only, which makes it independent of addend order and of partial-sum
//! grouping.

/// Number of 32-bit bins. Bit positions run from 2^-1074 (bin 1, offset 14)
/// up past 2^1023 plus headroom for carries from ~2^26 accumulated values.
const NBINS: usize = 68;

/// Exponent offset: stored bit position p corresponds to weight 2^(p - 1120).
const OFFSET: i32 = 1120;

/// Normalize carries after this many raw additions to keep bins within i64.
const NORM_INTERVAL: u32 = 1 << 26;

/// Wide fixed-point accumulator holding an exact sum of `f64` values.
#[derive(Clone, Debug)]
pub struct ExactAcc {
    bins: [i64; NBINS],
    pending: u32,
}

impl Default for ExactAcc {
    fn default() -> Self {
        Self::new()
    }
}

impl ExactAcc {
    pub fn new() -> Self {
        Self {
            bins: [0; NBINS],
            pending: 0,
        }
    }

    /// Adds a finite `f64` exactly.
    pub fn add(&mut self, x: f64) {
        debug_assert!(x.is_finite(), "ExactAcc::add requires finite input");
        if x == 0.0 {
            return;
        }
        let bits = x.to_bits();
        let neg = bits >> 63 == 1;
        let biased = ((bits >> 52) & 0x7ff) as i32;
        let frac = bits & 0x000f_ffff_ffff_ffff;
        // mantissa m and exponent e such that |x| = m * 2^e
        let (m, e) = if biased == 0 {
            (frac, -1074)
        } else {
            (frac | (1u64 << 52), biased - 1075)
        };
        let p = e + OFFSET;
        debug_assert!(p >= 0);
        let bin = (p >> 5) as usize;
        let shift = (p & 31) as u32;
        let wide = (m as u128) << shift; // at most 85 bits
        let chunks = [
            (wide & 0xffff_ffff) as i64,
            ((wide >> 32) & 0xffff_ffff) as i64,
            ((wide >> 64) & 0xffff_ffff) as i64,
        ];
        for (k, &c) in chunks.iter().enumerate() {
            if c != 0 {
                if neg {
                    self.bins[bin + k] -= c;
                } else {
                    self.bins[bin + k] += c;
                }
            }
        }
        self.pending += 1;
        if self.pending >= NORM_INTERVAL {
            self.normalize();
        }
    }

    /// Merges another accumulator into this one, exactly.
    pub fn merge(&mut self, other: &ExactAcc) {
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            *a += b;
        }
        self.pending = self
            .pending
            .saturating_add(other.pending)
            .saturating_add(1);
        if self.pending >= NORM_INTERVAL {
            self.normalize();
        }
    }

    pub fn is_zero(&self) -> bool {
        self.bins.iter().all(|&b| b == 0)
    }

    /// Carry-propagates so every bin lies in [0, 2^32) with an implicit
    /// non-negative value, or flips the sign first when the total is negative.
    fn normalize(&mut self) {
        self.pending = 0;
        if self.carry_pass() {
            return;
        }
        // Negative total: negate, re-propagate, negate back. The magnitude
        // representation stays canonical either way.
        for b in &mut self.bins {
            *b = -*b;
        }
        let ok = self.carry_pass();
        debug_assert!(ok, "accumulator magnitude exceeded bin range");
        for b in &mut self.bins {
            *b = -*b;
        }
    }

    /// One signed carry pass; returns false if the total was negative.
    fn carry_pass(&mut self) -> bool {
        let mut carry: i64 = 0;
        for b in &mut self.bins {
            let v = *b + carry;
            let low = v & 0xffff_ffff;
            carry = (v - low) >> 32;
            *b = low;
        }
        if carry == 0 {
            true
        } else {
            // Undo by folding the borrow back into the top bin.
            self.bins[NBINS - 1] += carry << 32;
            false
        }
    }

    /// Rounds the exact sum to the nearest `f64` (ties to even).
    pub fn round(&self) -> f64 {
        // Determine sign and obtain a canonical magnitude representation.
        let mut work = ExactAcc {
            bins: self.bins,
            pending: 0,
        };
        let sign = if work.carry_pass() {
            false
        } else {
            work.bins = self.bins;
            for b in &mut work.bins {
                *b = -*b;
            }
            let ok = work.carry_pass();
            debug_assert!(ok);
            true
        };
        let mag = work.bins;

        let top = match (0..NBINS).rev().find(|&k| mag[k] != 0) {
            Some(k) => k,
            None => return 0.0,
        };
        // Absolute position of the most significant set bit.
        let msb = top as i32 * 32 + 63 - (mag[top] as u64).leading_zeros() as i32;
        // The mantissa's least significant bit: 53 bits wide, clamped so the
        // result exponent never drops below the subnormal floor 2^-1074.
        let lsb = (msb - 52).max(46);

        let bit = |pos: i32| -> u64 {
            if pos < 0 {
                return 0;
            }
            let k = (pos >> 5) as usize;
            let s = (pos & 31) as u32;
            ((mag[k] as u64) >> s) & 1
        };

        let mut mant: u64 = 0;
        for pos in (lsb..=msb).rev() {
            mant = (mant << 1) | bit(pos);
        }
        let round_bit = bit(lsb - 1);
        let mut sticky = false;
        for pos in (0..lsb - 1).rev() {
            if bit(pos) == 1 {
                sticky = true;
                break;
            }
        }
        if round_bit == 1 && (sticky || mant & 1 == 1) {
            mant += 1;
        }
        let mut exp = lsb - OFFSET; // value = mant * 2^exp
        if mant == 1 << 53 {
            mant >>= 1;
            exp += 1;
        }

        // Assemble the IEEE-754 double.
        let bits: u64 = if mant == 0 {
            0
        } else if exp == -1074 && mant < (1 << 52) {
            mant // subnormal
        } else {
            debug_assert!(((1u64 << 52)..(1 << 53)).contains(&mant));
            let be = (exp + 52 + 1023) as u64;
            debug_assert!((1..=2046).contains(&be), "overflow outside test domain");
            (be << 52) | (mant & 0x000f_ffff_ffff_ffff)
        };
        let bits = if sign { bits | (1 << 63) } else { bits };
        f64::from_bits(bits)
    }
}

/// A fixed-length vector of exact accumulators (one per tensor component).
#[derive(Clone, Debug)]
pub struct ExactVec {
    pub accs: Vec<ExactAcc>,
}

impl ExactVec {
    pub fn zeros(len: usize) -> Self {
        Self {
            accs: vec![ExactAcc::new(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.accs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accs.is_empty()
    }

    pub fn add_slice(&mut self, xs: &[f64]) {
        debug_assert_eq!(xs.len(), self.accs.len());
        for (a, &x) in self.accs.iter_mut().zip(xs) {
            a.add(x);
        }
    }

    pub fn add_scaled(&mut self, xs: &[f64], s: f64) {
        debug_assert_eq!(xs.len(), self.accs.len());
        for (a, &x) in self.accs.iter_mut().zip(xs) {
            a.add(x * s);
        }
    }

    pub fn merge(&mut self, other: &ExactVec) {
        debug_assert_eq!(self.accs.len(), other.accs.len());
        for (a, b) in self.accs.iter_mut().zip(&other.accs) {
            a.merge(b);
        }
    }

    pub fn round_into(&self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.accs.len());
        for (o, a) in out.iter_mut().zip(&self.accs) {
            *o = a.round();
        }
    }

    pub fn round_vec(&self) -> Vec<f64> {
        self.accs.iter().map(|a| a.round()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use num_traits::{Signed, ToPrimitive, Zero};
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Reference: exact rational sum rounded to nearest-even f64.
    fn rational_sum_rounded(xs: &[f64]) -> f64 {
        let mut sum = BigRational::zero();
        for &x in xs {
            sum += BigRational::from_float(x).unwrap();
        }
        round_rational(&sum)
    }

    fn round_rational(q: &BigRational) -> f64 {
        if q.is_zero() {
            return 0.0;
        }
        let neg = q.is_negative();
        let a = q.abs();
        // Find e with 2^52 <= a * 2^-e < 2^53 by scaling, then round.
        let two = BigRational::from_integer(BigInt::from(2));
        let lo = BigRational::from_integer(BigInt::from(1u64 << 52));
        let hi = BigRational::from_integer(BigInt::from(1u64 << 53));
        let mut e: i32 = 0;
        let mut v = a.clone();
        while v >= hi {
            v /= &two;
            e += 1;
        }
        while v < lo {
            v *= &two;
            e -= 1;
        }
        // Subnormal clamp: if the unbiased exponent is below -1022 the
        // mantissa has fewer bits. Re-scale to lsb = 2^-1074.
        if e < -1074 {
            let mut v2 = a;
            let mut k = 0i64;
            while k > -1074 {
                v2 *= &two;
                k -= 1;
            }
            let fl = v2.floor().to_integer();
            let rem = &v2 - BigRational::from_integer(fl.clone());
            let half = BigRational::new(BigInt::from(1), BigInt::from(2));
            let mut m = fl;
            if rem > half || (rem == half && (&m % 2) == BigInt::from(1)) {
                m += 1;
            }
            let out = m.to_f64().unwrap() * 2f64.powi(-1074);
            return if neg { -out } else { out };
        }
        let fl = v.floor().to_integer();
        let rem = &v - BigRational::from_integer(fl.clone());
        let half = BigRational::new(BigInt::from(1), BigInt::from(2));
        let mut m = fl;
        if rem > half || (rem == half && (&m % 2) == BigInt::from(1)) {
            m += 1;
        }
        let mut mf = m.to_f64().unwrap();
        let mut ee = e;
        if mf == (1u64 << 53) as f64 {
            mf /= 2.0;
            ee += 1;
        }
        let out = mf * 2f64.powi(ee);
        if neg {
            -out
        } else {
            out
        }
    }

    fn acc_sum(xs: &[f64]) -> f64 {
        let mut a = ExactAcc::new();
        for &x in xs {
            a.add(x);
        }
        a.round()
    }

    #[test]
    fn single_values_round_trip() {
        let vals = [
            0.0,
            1.0,
            -1.0,
            0.1,
            -0.1,
            1e300,
            -1e300,
            1e-300,
            5e-324,
            f64::MIN_POSITIVE,
            1.5,
            std::f64::consts::PI,
        ];
        for &v in &vals {
            assert_eq!(acc_sum(&[v]).to_bits(), v.to_bits(), "value {v}");
        }
    }

    #[test]
    fn cancellation_is_exact() {
        assert_eq!(acc_sum(&[1e16, 1.0, -1e16]), 1.0);
        assert_eq!(acc_sum(&[1e308, -1e308, 1e-308]), 1e-308);
        assert_eq!(acc_sum(&[2.0, -2.0]), 0.0);
    }

    #[test]
    fn matches_rational_oracle_on_random_sets() {
        let mut rng = StdRng::seed_from_u64(7);
        for case in 0..200 {
            let n = rng.gen_range(1..40);
            let xs: Vec<f64> = (0..n)
                .map(|_| {
                    let m: f64 = rng.gen_range(-1.0..1.0);
                    let e: i32 = rng.gen_range(-40..40);
                    m * 2f64.powi(e)
                })
                .collect();
            let got = acc_sum(&xs);
            let want = rational_sum_rounded(&xs);
            assert_eq!(got.to_bits(), want.to_bits(), "case {case}: {xs:?}");
        }
    }

    #[test]
    fn grouping_invariance() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..100 {
            let n = rng.gen_range(2..60);
            let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1e6..1e6)).collect();
            let direct = acc_sum(&xs);
            // Split into random groups, accumulate each, then merge.
            let groups = rng.gen_range(2..5usize);
            let mut accs: Vec<ExactAcc> = (0..groups).map(|_| ExactAcc::new()).collect();
            for &x in &xs {
                let g = rng.gen_range(0..groups);
                accs[g].add(x);
            }
            let mut total = ExactAcc::new();
            for a in accs.iter().rev() {
                total.merge(a);
            }
            assert_eq!(total.round().to_bits(), direct.to_bits());
        }
    }

    proptest! {
        #[test]
        fn permutation_invariance(seed in 0u64..500) {
            let mut rng = StdRng::seed_from_u64(seed);
            let n = rng.gen_range(2..30);
            let xs: Vec<f64> = (0..n).map(|_| {
                let m: f64 = rng.gen_range(-100.0..100.0);
                let e: i32 = rng.gen_range(-20..20);
                m * 2f64.powi(e)
            }).collect();
            let fwd = acc_sum(&xs);
            let mut rev = xs.clone();
            rev.reverse();
            prop_assert_eq!(fwd.to_bits(), acc_sum(&rev).to_bits());
            prop_assert_eq!(fwd.to_bits(), rational_sum_rounded(&xs).to_bits());
        }
    }
}
