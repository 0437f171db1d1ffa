//! Multi-threshold units: integer activations that replace
//! `clamp(round_half_even(a * acc + b), lo, hi)`.

use crate::graph::ThresholdUnit;
use crate::qtensor::int_range;
use crate::scalar::Scalar;

use super::LowerError;

/// Per-channel affine map from accumulator units to output integer units
/// (the output scale is already divided into both terms).
#[derive(Clone, Debug, PartialEq)]
pub struct AffineSpec<T> {
    pub a: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> AffineSpec<T> {
    pub fn new(a: Vec<T>, b: Vec<T>) -> Result<Self, LowerError> {
        if a.len() != b.len() {
            return Err(LowerError::Invalid(format!("affine has {} multipliers and {} biases", a.len(), b.len())));
        }
        if let Some(c) = a.iter().zip(&b).position(|(a, b)| !a.is_finite() || *a == T::zero() || !b.is_finite()) {
            return Err(LowerError::Invalid(format!("affine channel {c} is not finite and nonzero")));
        }
        Ok(Self { a, b })
    }

    pub fn identity(channels: usize) -> Self {
        Self { a: vec![T::one(); channels], b: vec![T::zero(); channels] }
    }

    pub fn channels(&self) -> usize {
        self.a.len()
    }

    /// The unclamped real-to-integer map the thresholds implement.
    pub fn level(&self, channel: usize, acc: i64) -> T {
        (self.a[channel] * T::from_int(acc) + self.b[channel]).round_half_even()
    }
}

/// Output integer range of a threshold unit.
pub fn output_range(out_bits: u8, out_signed: bool) -> Result<(i32, i32), LowerError> {
    if !(1..=8).contains(&out_bits) {
        return Err(LowerError::Invalid(format!("threshold output width {out_bits} outside 1..=8")));
    }
    if out_signed && out_bits == 1 {
        return Err(LowerError::Invalid("signed activations need at least 2 bits".into()));
    }
    Ok(int_range(out_bits, out_signed))
}

/// Derives thresholds so that, for every integer `acc` in `acc_range`,
/// counting crossed thresholds reproduces `clamp(round_half_even(a*acc + b))`.
///
/// Each threshold is the smallest accumulator in range whose rounded affine
/// value reaches the level, found by bisection on the same floating-point
/// expression. Levels unreachable inside the range sit at `hi + 1`.
pub fn compute_thresholds<T: Scalar>(
    aff: &AffineSpec<T>,
    acc_range: (i64, i64),
    out_bits: u8,
    out_signed: bool,
) -> Result<ThresholdUnit, LowerError> {
    let (lo, hi) = output_range(out_bits, out_signed)?;
    let (acc_lo, acc_hi) = acc_range;
    if acc_lo > acc_hi {
        return Err(LowerError::Invalid(format!("empty accumulator range [{acc_lo}, {acc_hi}]")));
    }
    if let Some(c) = aff.a.iter().position(|a| !(*a > T::zero())) {
        return Err(LowerError::NonPositiveMultiplier { channel: c });
    }
    let levels = (hi - lo) as usize;
    let thresholds = (0..aff.channels())
        .map(|c| {
            let reaches = |acc: i64, target: i32| aff.level(c, acc) >= T::from_int(target as i64);
            let mut out = Vec::with_capacity(levels);
            let mut start = acc_lo;
            for j in 1..=levels as i32 {
                let target = lo + j;
                let t = if !reaches(acc_hi, target) {
                    acc_hi + 1
                } else {
                    // smallest acc in [start, acc_hi] with level >= target
                    let (mut l, mut h) = (start, acc_hi);
                    while l < h {
                        let mid = l + (h - l) / 2;
                        if reaches(mid, target) {
                            h = mid;
                        } else {
                            l = mid + 1;
                        }
                    }
                    l
                };
                start = t.min(acc_hi);
                out.push(t);
            }
            out
        })
        .collect();
    let unit = ThresholdUnit { thresholds, out_bits, out_signed, out_offset: lo };
    debug_assert!(is_sorted(&unit));
    Ok(unit)
}

pub fn is_sorted(unit: &ThresholdUnit) -> bool {
    unit.thresholds.iter().all(|ch| ch.windows(2).all(|w| w[0] <= w[1]))
}

/// Evaluates one accumulator: `clamp(offset + #{k : acc >= t_k}, lo, hi)`.
#[inline]
pub fn threshold_eval(thresholds: &[i64], acc: i64, lo: i32, hi: i32) -> i32 {
    let crossed = thresholds.partition_point(|&t| t <= acc) as i64;
    (lo as i64 + crossed).clamp(lo as i64, hi as i64) as i32
}

/// Applies a threshold unit to accumulators laid out `[C, pixels]`.
pub fn multithreshold_eval(acc: &[i64], unit: &ThresholdUnit) -> Vec<i32> {
    let channels = unit.thresholds.len().max(1);
    let per = acc.len() / channels;
    let (lo, hi) = int_range(unit.out_bits, unit.out_signed);
    acc.iter()
        .enumerate()
        .map(|(i, &a)| {
            let c = if per == 0 { 0 } else { i / per };
            threshold_eval(&unit.thresholds[c], a, lo, hi)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn oracle(aff: &AffineSpec<f64>, c: usize, acc: i64, bits: u8, signed: bool) -> i32 {
        let (lo, hi) = int_range(bits, signed);
        let v = aff.a[c] * acc as f64 + aff.b[c];
        // half-to-even via the std tie rule
        let r = v.round_ties_even();
        r.clamp(lo as f64, hi as f64) as i32
    }

    fn eval(unit: &ThresholdUnit, c: usize, acc: i64) -> i32 {
        let (lo, hi) = int_range(unit.out_bits, unit.out_signed);
        threshold_eval(&unit.thresholds[c], acc, lo, hi)
    }

    #[test]
    fn identity_two_bit_unsigned() {
        let aff = AffineSpec::new(vec![1.0], vec![0.0]).unwrap();
        let u = compute_thresholds(&aff, (-10, 10), 2, false).unwrap();
        assert_eq!(u.thresholds[0], vec![1, 2, 3]);
        assert_eq!(eval(&u, 0, 0), 0);
        assert_eq!(eval(&u, 0, 2), 2);
        assert_eq!(eval(&u, 0, 9), 3);
        for acc in -10..=10 {
            assert_eq!(eval(&u, 0, acc), acc.clamp(0, 3) as i32);
        }
    }

    #[test]
    fn half_multiplier_one_bit() {
        // 0.5 * 1 is a tie and rounds to 0; the level is first reached at acc = 2
        let aff = AffineSpec::new(vec![0.5], vec![0.0]).unwrap();
        let u = compute_thresholds(&aff, (-4, 8), 1, false).unwrap();
        for acc in -4..=8 {
            assert_eq!(eval(&u, 0, acc), oracle(&aff, 0, acc, 1, false), "acc {acc}");
        }
        assert_eq!(u.thresholds[0], vec![2]);
        assert_eq!(eval(&u, 0, 0), 0);
        assert_eq!(eval(&u, 0, 1), 0);
        assert_eq!(eval(&u, 0, 2), 1);
    }

    #[test]
    fn saturation_both_ends() {
        let aff = AffineSpec::new(vec![0.37, 2.5], vec![-0.2, 1.1]).unwrap();
        let u = compute_thresholds(&aff, (-50, 50), 3, true).unwrap();
        for c in 0..2 {
            assert_eq!(eval(&u, c, -1_000_000), -3);
            assert_eq!(eval(&u, c, 1_000_000), 3);
        }
        assert_eq!(u.thresholds[0].len(), 6);
        assert!(is_sorted(&u));
    }

    #[test]
    fn rejects_non_positive_multiplier() {
        let aff = AffineSpec { a: vec![1.0, -0.5], b: vec![0.0, 0.0] };
        assert_eq!(compute_thresholds(&aff, (0, 3), 2, false), Err(LowerError::NonPositiveMultiplier { channel: 1 }));
        assert!(AffineSpec::new(vec![0.0], vec![0.0f64]).is_err());
    }

    #[test]
    fn example_counts() {
        let u = ThresholdUnit { thresholds: vec![vec![2, 5, 9]], out_bits: 2, out_signed: false, out_offset: 0 };
        assert_eq!(multithreshold_eval(&[5], &u), vec![2]);
        assert_eq!(multithreshold_eval(&[-1_000_000, 1_000_000, 9, 1], &u), vec![0, 3, 3, 0]);
    }

    proptest! {
        #[test]
        fn exhaustive_against_oracle(
            a in prop::collection::vec(1e-3f64..4.0, 1..4),
            b_seed in prop::collection::vec(-6.0f64..6.0, 4),
            lo in -300i64..0,
            span in 0i64..600,
            bits in 1u8..=8,
            signed in any::<bool>(),
        ) {
            let bits = if signed { bits.max(2) } else { bits };
            let b = b_seed[..a.len()].to_vec();
            let aff = AffineSpec::new(a, b).unwrap();
            let u = compute_thresholds(&aff, (lo, lo + span), bits, signed).unwrap();
            prop_assert!(is_sorted(&u));
            for c in 0..aff.channels() {
                prop_assert_eq!(u.thresholds[c].len(), (int_range(bits, signed).1 - int_range(bits, signed).0) as usize);
                for acc in lo..=lo + span {
                    prop_assert_eq!(eval(&u, c, acc), oracle(&aff, c, acc, bits, signed));
                }
            }
        }

        #[test]
        fn eval_is_monotone(mut ts in prop::collection::vec(-100i64..100, 0..15), x in -200i64..200, y in -200i64..200) {
            ts.sort();
            let (a, b) = if x <= y { (x, y) } else { (y, x) };
            prop_assert!(threshold_eval(&ts, a, 0, 15) <= threshold_eval(&ts, b, 0, 15));
        }
    }
}
