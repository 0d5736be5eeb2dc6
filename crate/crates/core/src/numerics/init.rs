use ndarray::Array2;
use rand::Rng;

use super::NumArray;
use crate::error::{Error, Result};

/// Symmetric uniform initialization range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitRange {
    pub lo: f64,
    pub hi: f64,
}

impl InitRange {
    /// ±0.08, the default.
    pub const NARROW: InitRange = InitRange { lo: -0.08, hi: 0.08 };
    /// ±0.8, the value printed in the original training-details table.
    pub const WIDE: InitRange = InitRange { lo: -0.8, hi: 0.8 };

    pub fn symmetric(scale: f64) -> Self {
        InitRange {
            lo: -scale,
            hi: scale,
        }
    }
}

impl Default for InitRange {
    fn default() -> Self {
        InitRange::NARROW
    }
}

/// I.i.d. draws from `[lo, hi)`, filled in row-major order.
pub fn uniform_init<R: Rng>(rows: usize, cols: usize, range: InitRange, rng: &mut R) -> Result<NumArray> {
    let InitRange { lo, hi } = range;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::config(format!("invalid init range [{lo}, {hi})")));
    }
    let mut out = Array2::zeros((rows, cols));
    for v in out.iter_mut() {
        let u: f64 = rng.random();
        *v = lo + (hi - lo) * u;
    }
    Ok(out)
}
