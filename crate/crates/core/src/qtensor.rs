//! Per-channel symmetric uniform quantization.
//!
//! Integers use the narrow symmetric range `[-(2^(b-1)-1), 2^(b-1)-1]` so that
//! negation stays in range. One-bit tensors are binary `{-1, +1}` with a
//! per-channel scale equal to the mean absolute value of the channel.
//! Rounding is half-to-even everywhere.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::FloatTensor;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("bit width {0} outside 1..=8")]
    InvalidBitWidth(u8),
    #[error("channel axis {axis} invalid for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("cannot quantize an empty tensor")]
    Empty,
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("value {value} at flat index {index} outside [{lo}, {hi}]")]
    OutOfRange { index: usize, value: i32, lo: i32, hi: i32 },
    #[error("binary tensor holds {value} at flat index {index}; expected -1 or +1")]
    NotBinary { index: usize, value: i32 },
    #[error("scale for channel {0} is not strictly positive and finite")]
    BadScale(usize),
    #[error("{got} scales given for a channel axis of size {want}")]
    ScaleCount { got: usize, want: usize },
    #[error("payload length {len} does not match dims {dims:?}")]
    LengthMismatch { dims: Vec<usize>, len: usize },
}

/// Inclusive integer range representable with `bits` under this scheme.
pub fn int_range(bits: u8, signed: bool) -> (i32, i32) {
    debug_assert!((1..=8).contains(&bits));
    if signed {
        if bits == 1 {
            (-1, 1)
        } else {
            let m = (1i32 << (bits - 1)) - 1;
            (-m, m)
        }
    } else {
        (0, (1i32 << bits) - 1)
    }
}

/// Largest positive integer level, the divisor used for max-abs calibration.
pub fn max_level(bits: u8, signed: bool) -> i32 {
    int_range(bits, signed).1
}

fn check_bits(bits: u8) -> Result<(), QuantError> {
    if (1..=8).contains(&bits) {
        Ok(())
    } else {
        Err(QuantError::InvalidBitWidth(bits))
    }
}

/// Quantizes a single value against a positive scale.
pub fn quantize_value<T: Scalar>(x: T, scale: T, bits: u8, signed: bool) -> i32 {
    if signed && bits == 1 {
        return if x < T::zero() { -1 } else { 1 };
    }
    let (lo, hi) = int_range(bits, signed);
    let r = (x / scale).round_half_even();
    let lo_t = T::from_int(lo as i64);
    let hi_t = T::from_int(hi as i64);
    r.max(lo_t).min(hi_t).to_i32().expect("clamped value fits i32")
}

/// Integer payload with per-channel scales and a zero point of 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantTensor<T> {
    dims: Vec<usize>,
    data: Vec<i32>,
    scales: Vec<T>,
    channel_axis: usize,
    bit_width: u8,
    signed: bool,
    /// Channels that were entirely zero at quantization time and received the
    /// fallback scale of 1.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    zero_channels: Vec<usize>,
}

impl<T: Scalar> QuantTensor<T> {
    pub fn new(
        dims: Vec<usize>,
        data: Vec<i32>,
        scales: Vec<T>,
        channel_axis: usize,
        bit_width: u8,
        signed: bool,
    ) -> Result<Self, QuantError> {
        check_bits(bit_width)?;
        if channel_axis >= dims.len() {
            return Err(QuantError::InvalidAxis { axis: channel_axis, rank: dims.len() });
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(QuantError::LengthMismatch { dims, len: data.len() });
        }
        if scales.len() != dims[channel_axis] {
            return Err(QuantError::ScaleCount { got: scales.len(), want: dims[channel_axis] });
        }
        if let Some(c) = scales.iter().position(|s| !(s.is_finite() && *s > T::zero())) {
            return Err(QuantError::BadScale(c));
        }
        let (lo, hi) = int_range(bit_width, signed);
        for (index, &value) in data.iter().enumerate() {
            if signed && bit_width == 1 {
                if value != -1 && value != 1 {
                    return Err(QuantError::NotBinary { index, value });
                }
            } else if value < lo || value > hi {
                return Err(QuantError::OutOfRange { index, value, lo, hi });
            }
        }
        Ok(Self { dims, data, scales, channel_axis, bit_width, signed, zero_channels: Vec::new() })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn scales(&self) -> &[T] {
        &self.scales
    }

    pub fn channel_axis(&self) -> usize {
        self.channel_axis
    }

    pub fn bit_width(&self) -> u8 {
        self.bit_width
    }

    pub fn signed(&self) -> bool {
        self.signed
    }

    pub fn zero_point(&self) -> i32 {
        0
    }

    pub fn zero_channels(&self) -> &[usize] {
        &self.zero_channels
    }

    pub fn with_zero_channels(mut self, channels: Vec<usize>) -> Self {
        self.zero_channels = channels;
        self
    }

    pub fn channels(&self) -> usize {
        self.dims[self.channel_axis]
    }

    /// Number of contiguous elements sharing one channel index.
    fn inner_stride(&self) -> usize {
        self.dims[self.channel_axis + 1..].iter().product()
    }

    pub fn channel_of(&self, flat: usize) -> usize {
        (flat / self.inner_stride()) % self.channels()
    }

    /// Returns a copy with the listed channels negated. Closed under the narrow
    /// symmetric range.
    pub fn negate_channels(&self, channels: &[usize]) -> Self {
        let mut out = self.clone();
        if channels.is_empty() {
            return out;
        }
        let stride = self.inner_stride();
        let n = self.channels();
        for (i, v) in out.data.iter_mut().enumerate() {
            if channels.contains(&((i / stride) % n)) {
                *v = -*v;
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> QuantTensor<U> {
        QuantTensor {
            dims: self.dims.clone(),
            data: self.data.clone(),
            scales: self.scales.iter().map(|s| U::lit(s.as_f64())).collect(),
            channel_axis: self.channel_axis,
            bit_width: self.bit_width,
            signed: self.signed,
            zero_channels: self.zero_channels.clone(),
        }
    }
}

/// Symmetric per-channel quantization with max-abs calibration (mean-abs for
/// one bit).
pub fn quantize_per_channel<T: Scalar>(
    w: &FloatTensor<T>,
    bit_width: u8,
    channel_axis: usize,
) -> Result<QuantTensor<T>, QuantError> {
    check_bits(bit_width)?;
    let dims = w.dims().to_vec();
    if channel_axis >= dims.len() {
        return Err(QuantError::InvalidAxis { axis: channel_axis, rank: dims.len() });
    }
    if w.is_empty() {
        return Err(QuantError::Empty);
    }
    if let Some(i) = w.data().iter().position(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite(i));
    }
    let channels = dims[channel_axis];
    let stride: usize = dims[channel_axis + 1..].iter().product();
    let channel_of = |i: usize| (i / stride) % channels;

    let mut max_abs = vec![T::zero(); channels];
    let mut sum_abs = vec![T::zero(); channels];
    let mut count = vec![0usize; channels];
    for (i, &v) in w.data().iter().enumerate() {
        let c = channel_of(i);
        max_abs[c] = max_abs[c].max(v.abs());
        sum_abs[c] += v.abs();
        count[c] += 1;
    }

    let mut zero_channels = Vec::new();
    let scales: Vec<T> = (0..channels)
        .map(|c| {
            if max_abs[c] == T::zero() {
                zero_channels.push(c);
                T::one()
            } else if bit_width == 1 {
                sum_abs[c] / T::from_usize(count[c]).unwrap()
            } else {
                max_abs[c] / T::from_int(max_level(bit_width, true) as i64)
            }
        })
        .collect();

    let data = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = channel_of(i);
            if bit_width == 1 {
                if zero_channels.contains(&c) {
                    // an all-zero binary channel still has to hold +-1
                    1
                } else if v < T::zero() {
                    -1
                } else {
                    1
                }
            } else {
                quantize_value(v, scales[c], bit_width, true)
            }
        })
        .collect();

    let mut q = QuantTensor::new(dims, data, scales, channel_axis, bit_width, true)?;
    q.zero_channels = zero_channels;
    Ok(q)
}

/// `out[i] = q[i] * scale[channel(i)]`.
pub fn dequantize<T: Scalar>(q: &QuantTensor<T>) -> FloatTensor<T> {
    let data = q
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| T::from_int(v as i64) * q.scales[q.channel_of(i)])
        .collect();
    FloatTensor::new(q.dims.clone(), data).expect("finite products of finite values")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn oracle_rhe(x: f64) -> f64 {
        // independent tie rule: exact .5 fractions go to the even neighbour
        let r = x.round();
        if (x - x.trunc()).abs() == 0.5 && r % 2.0 != 0.0 {
            r - x.signum()
        } else {
            r
        }
    }

    fn q1(values: &[f64], bits: u8) -> QuantTensor<f64> {
        let t = FloatTensor::new(vec![1, values.len()], values.to_vec()).unwrap();
        quantize_per_channel(&t, bits, 0).unwrap()
    }

    #[test]
    fn eight_bit_example() {
        let q = q1(&[0.5, -1.0, 0.25], 8);
        assert_eq!(q.scales(), &[1.0 / 127.0]);
        let s = 1.0 / 127.0;
        let want: Vec<i32> = [0.5, -1.0, 0.25].iter().map(|v| oracle_rhe(v / s) as i32).collect();
        assert_eq!(want, vec![64, -127, 32]);
        assert_eq!(q.data(), &[64, -127, 32]);
    }

    #[test]
    fn three_bit_example() {
        let q = q1(&[0.9, -0.3], 3);
        assert!((q.scales()[0] - 0.3).abs() < 1e-15);
        assert_eq!(q.data(), &[3, -1]);
    }

    #[test]
    fn all_zero_channel_gets_unit_scale() {
        let q = q1(&[0.0, 0.0], 4);
        assert_eq!(q.scales(), &[1.0]);
        assert_eq!(q.data(), &[0, 0]);
        assert_eq!(q.zero_channels(), &[0]);
        assert_eq!(dequantize(&q).data(), &[0.0, 0.0]);
    }

    #[test]
    fn binary_example() {
        let q = q1(&[0.5, -0.25], 1);
        assert_eq!(q.scales(), &[0.375]);
        assert_eq!(q.data(), &[1, -1]);
        // sign(0) maps to +1
        let q = q1(&[0.0, -2.0], 1);
        assert_eq!(q.data(), &[1, -1]);
    }

    #[test]
    fn dequantize_examples() {
        let q = QuantTensor::new(vec![1], vec![64], vec![1.0f64 / 127.0], 0, 8, true).unwrap();
        assert!((dequantize(&q).data()[0] - 0.503_937_007_874_015_7).abs() < 1e-15);
        let z = QuantTensor::new(vec![1, 2], vec![0, 0], vec![0.7f64], 0, 8, true).unwrap();
        assert_eq!(dequantize(&z).data(), &[0.0, 0.0]);
    }

    #[test]
    fn error_paths() {
        let t = FloatTensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(quantize_per_channel(&t, 0, 0), Err(QuantError::InvalidBitWidth(0)));
        assert_eq!(quantize_per_channel(&t, 9, 0), Err(QuantError::InvalidBitWidth(9)));
        assert!(matches!(quantize_per_channel(&t, 4, 2), Err(QuantError::InvalidAxis { .. })));
        let e = FloatTensor::<f64>::new(vec![0, 3], vec![]).unwrap();
        assert_eq!(quantize_per_channel(&e, 4, 0), Err(QuantError::Empty));
        assert!(matches!(
            QuantTensor::new(vec![1], vec![8], vec![1.0], 0, 4, true),
            Err(QuantError::OutOfRange { .. })
        ));
        assert!(matches!(
            QuantTensor::new(vec![1], vec![0], vec![1.0], 0, 1, true),
            Err(QuantError::NotBinary { .. })
        ));
        assert_eq!(
            QuantTensor::new(vec![1], vec![0], vec![0.0f64], 0, 4, true),
            Err(QuantError::BadScale(0))
        );
    }

    #[test]
    fn channel_axis_other_than_zero() {
        // dims [2, 3], channel axis 1: channels are columns
        let t = FloatTensor::new(vec![2, 3], vec![1.0, 0.1, -4.0, -2.0, 0.2, 2.0]).unwrap();
        let q = quantize_per_channel(&t, 2, 1).unwrap();
        assert_eq!(q.scales(), &[2.0, 0.2, 4.0]);
        assert_eq!(q.data(), &[0, 0, -1, -1, 1, 0]);
    }

    /// Valid quantized tensors as produced by calibration: each non-zero
    /// channel reaches the extreme level at least once.
    fn calibrated_tensor() -> impl Strategy<Value = QuantTensor<f64>> {
        (1u8..=8, 1usize..5, 1usize..6).prop_flat_map(|(bits, ch, inner)| {
            let (lo, hi) = int_range(bits, true);
            let cells = prop::collection::vec(lo..=hi, ch * inner);
            let scales = prop::collection::vec(1e-4f64..10.0, ch);
            let peaks = prop::collection::vec((0..inner, any::<bool>()), ch);
            (Just(bits), Just(ch), Just(inner), cells, scales, peaks).prop_map(
                move |(bits, ch, inner, mut cells, scales, peaks)| {
                    for (c, (pos, neg)) in peaks.into_iter().enumerate() {
                        cells[c * inner + pos] = if neg { -hi } else { hi };
                    }
                    if bits == 1 {
                        for v in cells.iter_mut() {
                            if *v == 0 {
                                *v = 1;
                            }
                        }
                    }
                    QuantTensor::new(vec![ch, inner], cells, scales, 0, bits, true).unwrap()
                },
            )
        })
    }

    proptest! {
        #[test]
        fn round_trip(q in calibrated_tensor()) {
            let back = quantize_per_channel(&dequantize(&q), q.bit_width(), 0).unwrap();
            prop_assert_eq!(back.data(), q.data());
        }

        #[test]
        fn clamps_out_of_calibration_inputs(
            bits in 2u8..=8,
            vals in prop::collection::vec(-1.0f64..1.0, 1..20),
            blow in 1.0f64..10.0,
        ) {
            let t = FloatTensor::new(vec![1, vals.len()], vals.clone()).unwrap();
            let q = quantize_per_channel(&t, bits, 0).unwrap();
            let (lo, hi) = int_range(bits, true);
            for v in &vals {
                let big = quantize_value(v * 10.0 * blow, q.scales()[0], bits, true);
                prop_assert!(big >= lo && big <= hi);
            }
        }

        #[test]
        fn monotone_in_input(x in -5.0f64..5.0, y in -5.0f64..5.0, s in 1e-3f64..2.0, bits in 1u8..=8) {
            let (a, b) = if x <= y { (x, y) } else { (y, x) };
            prop_assert!(quantize_value(a, s, bits, true) <= quantize_value(b, s, bits, true));
            prop_assert!(quantize_value(a, s, bits, false) <= quantize_value(b, s, bits, false));
        }

        #[test]
        fn dequantize_within_one_step(vals in prop::collection::vec(-3.0f64..3.0, 1..16), bits in 2u8..=8) {
            let t = FloatTensor::new(vec![1, vals.len()], vals.clone()).unwrap();
            let q = quantize_per_channel(&t, bits, 0).unwrap();
            let d = dequantize(&q);
            for (a, b) in vals.iter().zip(d.data()) {
                prop_assert!((a - b).abs() <= q.scales()[0] * 0.5 + 1e-12);
            }
        }
    }
}
