//! Order-insensitive accumulation primitives used by the corpus aggregates.
//!
//! Quantities bounded to `[0, 1]` (attention weights, per-sample
//! probabilities) are accumulated as unsigned fixed-point integers, which makes
//! the result independent of summation order. Unbounded quantities (raw
//! similarity values) use Neumaier-compensated `f64` sums.

use serde::Serialize;

/// Fractional bits of the fixed-point grid (resolution ~9.1e-13).
pub const FIXED_FRAC_BITS: u32 = 40;
const FIXED_ONE: f64 = (1u64 << FIXED_FRAC_BITS) as f64;

/// Quantizes a value in `[0, 1]` to the fixed-point grid.
///
/// Out-of-range input is clamped; NaN maps to 0.
#[inline]
pub fn to_fixed(v: f64) -> u64 {
    (v.clamp(0.0, 1.0) * FIXED_ONE).round() as u64
}

#[inline]
pub fn from_fixed(v: u64) -> f64 {
    v as f64 / FIXED_ONE
}

/// Sum of `[0, 1]`-bounded values, exact on the fixed-point grid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FixedSum(u64);

impl FixedSum {
    #[inline]
    pub fn add(&mut self, v: f64) {
        self.0 += to_fixed(v);
    }

    pub fn merge(&mut self, other: FixedSum) {
        self.0 += other.0;
    }

    pub fn raw(&self) -> u64 {
        self.0
    }

    pub fn value(&self) -> f64 {
        from_fixed(self.0)
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: CompensatedSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_grid_round_trip() {
        for v in [0.0, 1.0, 0.5, 0.25, 1.0 / 3.0] {
            assert!((from_fixed(to_fixed(v)) - v).abs() <= 0.5 / FIXED_ONE);
        }
        assert_eq!(to_fixed(-0.1), 0);
        assert_eq!(to_fixed(f64::NAN), 0);
        assert_eq!(to_fixed(2.0), 1 << FIXED_FRAC_BITS);
    }

    #[test]
    fn compensated_beats_naive_cancellation() {
        let mut s = CompensatedSum::default();
        for v in [1e16, 1.0, -1e16, 1.0] {
            s.add(v);
        }
        assert_eq!(s.value(), 2.0);
    }

    #[test]
    fn compensated_merge() {
        let mut a = CompensatedSum::default();
        let mut b = CompensatedSum::default();
        a.add(1e16);
        a.add(1.0);
        b.add(-1e16);
        b.add(1.0);
        a.merge(b);
        assert_eq!(a.value(), 2.0);
    }
}
