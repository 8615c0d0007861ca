//! Fixed-point requantization: `round(acc * M)` with `M = mult * 2^-shift`.

use crate::error::{Error, Result};

/// A positive real multiplier encoded as a 31-bit mantissa and a right shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requant {
    /// In `[2^30, 2^31)`.
    pub multiplier: i32,
    pub shift: i32,
}

impl Requant {
    /// Encodes `m` with round-half-even on the mantissa.
    pub fn from_real(m: f64) -> Result<Self> {
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::Invalid(format!(
                "requant multiplier {m} is not positive"
            )));
        }
        let mut exp = m.log2().floor() as i32;
        let mut mant = (m / 2f64.powi(exp) * (1u64 << 30) as f64).round_ties_even();
        // guard log2 rounding at exact powers of two
        while mant >= (1u64 << 31) as f64 {
            exp += 1;
            mant = (m / 2f64.powi(exp) * (1u64 << 30) as f64).round_ties_even();
        }
        while mant < (1u64 << 30) as f64 {
            exp -= 1;
            mant = (m / 2f64.powi(exp) * (1u64 << 30) as f64).round_ties_even();
        }
        if mant >= (1u64 << 31) as f64 {
            exp += 1;
            mant = (1u64 << 30) as f64;
        }
        let shift = 30 - exp;
        if !(0..=100).contains(&shift) {
            return Err(Error::Invalid(format!(
                "requant multiplier {m} out of range"
            )));
        }
        Ok(Self {
            multiplier: mant as i32,
            shift,
        })
    }

    pub fn to_real(self) -> f64 {
        self.multiplier as f64 * 2f64.powi(-self.shift)
    }

    /// `acc * multiplier / 2^shift`, rounded half to even.
    pub fn apply(self, acc: i32) -> i64 {
        let prod = acc as i128 * self.multiplier as i128;
        shift_round_half_even(prod, self.shift as u32) as i64
    }
}

fn shift_round_half_even(v: i128, shift: u32) -> i128 {
    if shift == 0 {
        return v;
    }
    let q = v >> shift;
    let r = v - (q << shift);
    let half = 1i128 << (shift - 1);
    if r > half || (r == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}
