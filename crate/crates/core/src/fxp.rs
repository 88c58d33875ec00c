//! Signed two's-complement Q-format arithmetic.
//!
//! A [`QFormat`] fixes the total bit width and the number of fractional bits
//! of one tensor. Raw values are stored in `i32`; multiply-accumulate loops
//! use an `i128` accumulator and are brought back to a Q-format once, at
//! writeback, by [`requantize_accumulator`]. Rounding is half away from zero
//! everywhere and every conversion saturates instead of wrapping.

use std::fmt;

use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wide accumulator used by fixed-point MAC loops.
pub type Acc = i128;

pub const MIN_WIDTH: u32 = 2;
pub const MAX_WIDTH: u32 = 32;

/// Signed fixed-point format: `width` total bits including sign,
/// `frac_bits` of them fractional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "QFormatRepr", into = "QFormatRepr")]
pub struct QFormat {
    width: u32,
    frac_bits: u32,
}

#[derive(Serialize, Deserialize)]
struct QFormatRepr {
    width: u32,
    frac_bits: u32,
}

impl TryFrom<QFormatRepr> for QFormat {
    type Error = Error;

    fn try_from(r: QFormatRepr) -> Result<Self> {
        QFormat::new(r.width, r.frac_bits)
    }
}

impl From<QFormat> for QFormatRepr {
    fn from(q: QFormat) -> Self {
        QFormatRepr {
            width: q.width,
            frac_bits: q.frac_bits,
        }
    }
}

impl QFormat {
    pub fn new(width: u32, frac_bits: u32) -> Result<Self> {
        if !(MIN_WIDTH..=MAX_WIDTH).contains(&width) || frac_bits > width - 1 {
            return Err(Error::InvalidQFormat { width, frac_bits });
        }
        Ok(QFormat { width, frac_bits })
    }

    pub fn width(self) -> u32 {
        self.width
    }

    pub fn frac_bits(self) -> u32 {
        self.frac_bits
    }

    /// Integer bits, excluding the sign bit.
    pub fn int_bits(self) -> u32 {
        self.width - 1 - self.frac_bits
    }

    pub fn raw_min(self) -> i32 {
        (-(1i64 << (self.width - 1))) as i32
    }

    pub fn raw_max(self) -> i32 {
        ((1i64 << (self.width - 1)) - 1) as i32
    }

    /// Value of one least-significant bit, `2^-frac_bits`.
    pub fn step(self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn min_value(self) -> f64 {
        self.raw_min() as f64 * self.step()
    }

    pub fn max_value(self) -> f64 {
        self.raw_max() as f64 * self.step()
    }

    pub fn contains_raw(self, raw: i64) -> bool {
        raw >= self.raw_min() as i64 && raw <= self.raw_max() as i64
    }

    pub fn saturate(self, raw: Acc) -> i32 {
        raw.clamp(self.raw_min() as Acc, self.raw_max() as Acc) as i32
    }
}

impl fmt::Display for QFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}.{}", self.int_bits(), self.frac_bits)
    }
}

/// Observed magnitude range of a tensor: smallest and largest `|x|`.
///
/// `min_abs` is recorded for reporting only; format selection depends on
/// `max_abs` alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicRange {
    pub min_abs: f64,
    pub max_abs: f64,
}

impl DynamicRange {
    pub fn new(min_abs: f64, max_abs: f64) -> Result<Self> {
        if !(min_abs >= 0.0 && max_abs >= min_abs) {
            return Err(Error::InvalidArgument(format!(
                "dynamic range needs 0 <= min_abs <= max_abs, got [{min_abs}, {max_abs}]"
            )));
        }
        Ok(DynamicRange { min_abs, max_abs })
    }

    /// Range of a value sequence, `None` if it is empty.
    pub fn of<T: ToPrimitive + Copy>(values: &[T]) -> Option<Self> {
        values.iter().fold(None, |acc: Option<DynamicRange>, v| {
            let a = v.to_f64().unwrap_or(f64::NAN).abs();
            Some(match acc {
                None => DynamicRange { min_abs: a, max_abs: a },
                Some(r) => r.observe(a),
            })
        })
    }

    fn observe(self, a: f64) -> Self {
        DynamicRange {
            min_abs: self.min_abs.min(a),
            max_abs: self.max_abs.max(a),
        }
    }

    /// Associative, commutative union of two ranges.
    pub fn merge(self, other: DynamicRange) -> Self {
        DynamicRange {
            min_abs: self.min_abs.min(other.min_abs),
            max_abs: self.max_abs.max(other.max_abs),
        }
    }

    pub fn merge_opt(a: Option<Self>, b: Option<Self>) -> Option<Self> {
        match (a, b) {
            (Some(a), Some(b)) => Some(a.merge(b)),
            (a, None) => a,
            (None, b) => b,
        }
    }
}

/// Picks the format of the given width with the most fractional bits whose
/// positive range still covers `range.max_abs`.
///
/// `name` identifies the tensor in the overflow error.
pub fn derive_qformat(range: DynamicRange, width: u32, name: &str) -> Result<QFormat> {
    QFormat::new(width, 0)?;
    let max_abs = range.max_abs;
    if !max_abs.is_finite() || max_abs < 0.0 {
        return Err(Error::RangeOverflow {
            name: name.to_string(),
            max_abs,
            width,
        });
    }
    let raw_max = ((1i64 << (width - 1)) - 1) as f64;
    (0..width)
        .rev()
        .find(|&f| max_abs <= raw_max * (-(f as f64)).exp2())
        .map(|f| QFormat { width, frac_bits: f })
        .ok_or_else(|| Error::RangeOverflow {
            name: name.to_string(),
            max_abs,
            width,
        })
}

/// `clamp(round(x * 2^frac_bits))`; NaN maps to zero.
pub fn quantize_value<T: ToPrimitive>(x: T, q: QFormat) -> i32 {
    let x = x.to_f64().unwrap_or(f64::NAN);
    if x.is_nan() {
        return 0;
    }
    let scaled = (x * (q.frac_bits as f64).exp2()).round();
    scaled.clamp(q.raw_min() as f64, q.raw_max() as f64) as i32
}

/// Exact inverse scaling, `raw * 2^-frac_bits`.
pub fn dequantize_value(raw: i32, q: QFormat) -> f64 {
    raw as f64 * q.step()
}

/// Rescales `value` by `2^shift`, rounding half away from zero when
/// `shift < 0` and saturating to the accumulator range when `shift > 0`.
pub fn shift_round(value: Acc, shift: i32) -> Acc {
    if shift >= 0 {
        let s = shift.min(120) as u32;
        value.saturating_mul(1 << s)
    } else {
        let s = (-shift).min(127) as u32;
        let half = 1u128 << (s - 1);
        let mag = (value.unsigned_abs() + half) >> s;
        let mag = mag as Acc;
        if value < 0 {
            -mag
        } else {
            mag
        }
    }
}

/// Brings a sum of `raw(in) * raw(w)` products (scale `2^-(in_frac + w_frac)`)
/// into `out_q`.
pub fn requantize_accumulator(acc: Acc, in_q: QFormat, w_q: QFormat, out_q: QFormat) -> i32 {
    let shift = out_q.frac_bits as i32 - in_q.frac_bits as i32 - w_q.frac_bits as i32;
    out_q.saturate(shift_round(acc, shift))
}

/// Quantizes a value directly at accumulator scale `2^-frac_bits`, as used
/// for biases.
pub fn quantize_wide<T: ToPrimitive>(x: T, frac_bits: u32) -> i64 {
    let x = x.to_f64().unwrap_or(f64::NAN);
    if x.is_nan() {
        return 0;
    }
    (x * (frac_bits as f64).exp2())
        .round()
        .clamp(i64::MIN as f64, i64::MAX as f64) as i64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(w: u32, f: u32) -> QFormat {
        QFormat::new(w, f).unwrap()
    }

    fn range(max_abs: f64) -> DynamicRange {
        DynamicRange::new(0.0, max_abs).unwrap()
    }

    // Brute-force oracle: every frac_bits value whose representable maximum
    // covers max_abs, take the largest.
    fn oracle_frac(max_abs: f64, width: u32) -> Option<u32> {
        let mut best = None;
        for f in 0..width {
            let top = ((1i64 << (width - 1)) - 1) as f64 / (1u64 << f) as f64;
            if max_abs <= top {
                best = Some(f);
            }
        }
        best
    }

    #[test]
    fn qformat_bounds() {
        assert!(QFormat::new(1, 0).is_err());
        assert!(QFormat::new(33, 0).is_err());
        assert!(QFormat::new(16, 16).is_err());
        let f = q(16, 15);
        assert_eq!(f.raw_min(), -32768);
        assert_eq!(f.raw_max(), 32767);
        assert_eq!(f.int_bits(), 0);
        assert_eq!(f.min_value(), -1.0);
        let w32 = q(32, 0);
        assert_eq!(w32.raw_min(), i32::MIN);
        assert_eq!(w32.raw_max(), i32::MAX);
    }

    #[test]
    fn derive_examples() {
        assert_eq!(derive_qformat(range(0.0), 16, "t").unwrap().frac_bits(), 15);
        assert_eq!(derive_qformat(range(5.3), 16, "t").unwrap().frac_bits(), 12);
        assert_eq!(derive_qformat(range(1.0), 16, "t").unwrap().frac_bits(), 14);
        for (m, w) in [(0.0, 16), (5.3, 16), (1.0, 16), (100.0, 8), (0.3, 4)] {
            assert_eq!(
                derive_qformat(range(m), w, "t").unwrap().frac_bits(),
                oracle_frac(m, w).unwrap()
            );
        }
    }

    #[test]
    fn derive_overflow_names_tensor() {
        let err = derive_qformat(range(40000.0), 16, "conv3.weights").unwrap_err();
        assert!(err.to_string().contains("conv3.weights"));
        assert!(matches!(err, Error::RangeOverflow { .. }));
        assert!(derive_qformat(range(f64::INFINITY), 16, "x").is_err());
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_value(0.0, q(16, 8)), 0);
        assert_eq!(quantize_value(1.5, q(16, 8)), 384);
        assert_eq!(quantize_value(300.0, q(16, 8)), 32767);
        assert_eq!(quantize_value(-300.0, q(16, 8)), -32768);
        // half away from zero
        assert_eq!(quantize_value(0.5 / 256.0, q(16, 8)), 1);
        assert_eq!(quantize_value(-0.5 / 256.0, q(16, 8)), -1);
        assert_eq!(quantize_value(f64::NAN, q(16, 8)), 0);
        assert_eq!(quantize_value(1.5f32, q(16, 8)), 384);
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize_value(0, q(16, 3)), 0.0);
        assert_eq!(dequantize_value(384, q(16, 8)), 1.5);
        assert_eq!(dequantize_value(-32768, q(16, 15)), -1.0);
    }

    #[test]
    fn requantize_examples() {
        let f8 = q(16, 8);
        assert_eq!(requantize_accumulator(0, f8, f8, f8), 0);
        assert_eq!(requantize_accumulator(65536, f8, f8, f8), 256);
        assert_eq!(requantize_accumulator(1 << 30, f8, f8, f8), 32767);
        assert_eq!(requantize_accumulator(-(1 << 30), f8, f8, f8), -32768);
        // 384 / 256 = 1.5 -> 2, -1.5 -> -2
        assert_eq!(requantize_accumulator(384, q(16, 4), q(16, 4), q(16, 0)), 2);
        assert_eq!(requantize_accumulator(-384, q(16, 4), q(16, 4), q(16, 0)), -2);
        // upscaling
        assert_eq!(requantize_accumulator(3, q(16, 0), q(16, 0), q(16, 4)), 48);
    }

    #[test]
    fn shift_round_halves() {
        assert_eq!(shift_round(1, -1), 1);
        assert_eq!(shift_round(-1, -1), -1);
        assert_eq!(shift_round(5, -2), 1);
        assert_eq!(shift_round(6, -2), 2);
        assert_eq!(shift_round(-6, -2), -2);
        assert_eq!(shift_round(Acc::MAX / 2, 4), Acc::MAX);
    }

    #[test]
    fn range_accumulation() {
        let r = DynamicRange::of(&[-3.0f32, 2.0, 0.5]).unwrap();
        assert_eq!(r.max_abs, 3.0);
        assert_eq!(r.min_abs, 0.5);
        assert!(DynamicRange::of::<f64>(&[]).is_none());
        let m = r.merge(DynamicRange::new(0.1, 1.0).unwrap());
        assert_eq!((m.min_abs, m.max_abs), (0.1, 3.0));
        assert!(DynamicRange::new(2.0, 1.0).is_err());
    }

    fn qformat_strategy() -> impl Strategy<Value = QFormat> {
        (2u32..=32).prop_flat_map(|w| (Just(w), 0..w)).prop_map(|(w, f)| q(w, f))
    }

    proptest! {
        #[test]
        fn round_trip_bound(fmt in qformat_strategy(), u in 0.0f64..=1.0) {
            let x = fmt.min_value() + u * (fmt.max_value() - fmt.min_value());
            let back = dequantize_value(quantize_value(x, fmt), fmt);
            prop_assert!((x - back).abs() <= fmt.step() / 2.0);
        }

        #[test]
        fn quantize_is_monotone(fmt in qformat_strategy(), a in -1e6f64..1e6, b in -1e6f64..1e6) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize_value(lo, fmt) <= quantize_value(hi, fmt));
        }

        #[test]
        fn negation_symmetric_off_saturation(fmt in qformat_strategy(), x in -1e4f64..1e4) {
            let p = quantize_value(x, fmt);
            let n = quantize_value(-x, fmt);
            if p > fmt.raw_min() && p < fmt.raw_max() && n > fmt.raw_min() && n < fmt.raw_max() {
                prop_assert_eq!(p, -n);
            }
        }

        #[test]
        fn derive_is_maximal(width in 2u32..=32, max_abs in 0.0f64..1e9) {
            match derive_qformat(range(max_abs), width, "p") {
                Ok(fmt) => {
                    prop_assert!(max_abs <= fmt.max_value());
                    if fmt.frac_bits() + 1 < width {
                        prop_assert!(max_abs > q(width, fmt.frac_bits() + 1).max_value());
                    }
                    prop_assert_eq!(Some(fmt.frac_bits()), oracle_frac(max_abs, width));
                }
                Err(_) => prop_assert!(oracle_frac(max_abs, width).is_none()),
            }
        }
    }
}
