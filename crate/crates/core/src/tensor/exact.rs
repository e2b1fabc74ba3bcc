//! Order-independent exact summation.
//!
//! Every `f64` is an integer multiple of `2^-1074`, so it splits exactly into
//! 32-bit integer limbs of a fixed-point accumulator. Limbs are stored as
//! integer-valued `f64`s; elementwise addition of limb vectors is exact as
//! long as fewer than 2^20 values are summed, which lets an ordinary
//! sum-all-reduce combine per-rank partials with no rounding. The final value
//! is rounded once, so the result is independent of how the summands were
//! split across ranks or in which order they were added.

use super::ops::FnOp;
use super::{Array, Tensor};
use crate::error::Result;

const LIMB_BITS: i32 = 32;
const MIN_EXP: i32 = -1074;
/// Limb count; accepted magnitudes are below 2^66.
pub const LIMBS: usize = 36;

/// Fixed-point accumulator over limbs of `2^(MIN_EXP + 32 i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactAccumulator {
    limbs: [f64; LIMBS],
}

impl Default for ExactAccumulator {
    fn default() -> Self {
        ExactAccumulator {
            limbs: [0.0; LIMBS],
        }
    }
}

impl ExactAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        if !x.is_finite() || x.abs() >= pow2(MIN_EXP + LIMB_BITS * (LIMBS as i32 - 2) + 52) {
            if x != 0.0 {
                self.limbs = [f64::NAN; LIMBS];
            }
            return;
        }
        if x == 0.0 {
            return;
        }
        let bits = x.to_bits();
        let exp_bits = ((bits >> 52) & 0x7ff) as i32;
        let frac = bits & ((1u64 << 52) - 1);
        let (mant, exp) = if exp_bits == 0 {
            (frac, MIN_EXP)
        } else {
            (frac | (1u64 << 52), exp_bits - 1075)
        };
        let sign = if x < 0.0 { -1.0 } else { 1.0 };
        let offset = (exp - MIN_EXP) as u32;
        let k = (offset / LIMB_BITS as u32) as usize;
        let shifted = (mant as u128) << (offset % LIMB_BITS as u32);
        let mask = (1u128 << LIMB_BITS) - 1;
        for j in 0..3 {
            let part = (shifted >> (LIMB_BITS as u32 * j)) & mask;
            if part != 0 {
                self.limbs[k + j as usize] += sign * part as f64;
            }
        }
    }

    pub fn merge(&mut self, other: &ExactAccumulator) {
        for (a, b) in self.limbs.iter_mut().zip(&other.limbs) {
            *a += b;
        }
    }

    pub fn limbs(&self) -> &[f64; LIMBS] {
        &self.limbs
    }

    pub fn from_limbs(limbs: &[f64]) -> Self {
        let mut acc = Self::default();
        acc.limbs.copy_from_slice(&limbs[..LIMBS]);
        acc
    }

    /// Correctly rounded value of the accumulated sum.
    pub fn value(&self) -> f64 {
        exact_sum_value(&self.limbs)
    }
}

/// Rounds a limb vector to the nearest `f64`.
pub fn exact_sum_value(limbs: &[f64]) -> f64 {
    if limbs.iter().any(|v| v.is_nan()) {
        return f64::NAN;
    }
    let terms = limbs
        .iter()
        .enumerate()
        .map(|(i, &l)| l * pow2(MIN_EXP + LIMB_BITS * i as i32));
    fsum(terms)
}

/// Exact `2^e` for `-1074 <= e <= 1023`.
fn pow2(e: i32) -> f64 {
    if e >= -1022 {
        f64::from_bits(((e + 1023) as u64) << 52)
    } else {
        f64::from_bits(1u64 << (e + 1074))
    }
}

/// Correctly rounded floating-point sum (Shewchuk partials with half-even fix-up).
pub(crate) fn fsum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        let yr = x - hi;
        if y == yr {
            hi = x;
        }
    }
    hi
}

impl Tensor {
    /// Exact sum of all entries as a `[LIMBS]` accumulator tensor.
    ///
    /// Gradients flow through the accumulator as the same scalar in every
    /// slot; the backward reads slot 0.
    pub fn exact_sum(&self) -> Result<Tensor> {
        let mut acc = ExactAccumulator::new();
        for &x in self.value().data() {
            acc.add(x);
        }
        let out = Array::from_vec(acc.limbs.to_vec());
        self.tape.record(
            out,
            &[self],
            FnOp::new("exact_sum", |g, ins, _| {
                debug_assert!(g.data().iter().all(|&v| v == g.data()[0]));
                Ok(vec![Some(Array::full(ins[0].shape(), g.data()[0]))])
            }),
        )
    }

    /// Rounds a `[LIMBS]` accumulator tensor to a scalar.
    pub fn exact_round(&self) -> Result<Tensor> {
        let v = self.value();
        if v.shape() != [LIMBS] {
            return Err(crate::error::Error::shape("exact_round", v.shape(), &[LIMBS]));
        }
        let out = Array::scalar(exact_sum_value(v.data()));
        self.tape.record(
            out,
            &[self],
            FnOp::new("exact_round", |g, _, _| Ok(vec![Some(Array::full(&[LIMBS], g.item()))])),
        )
    }
}
