//! Differentiable-array core: tape, parameters, optimizer, initialization,
//! sampling and gradient verification.
//!
//! All arrays are rank-2 `f64` matrices in row-major order; a vector of
//! length `n` is stored as a `1×n` row.

mod adam;
mod gradcheck;
mod gru;
mod init;
mod params;
mod sample;
mod tape;

pub use adam::{adam_step, clip_grad_norm, AdamConfig};
pub use gradcheck::{grad_check, grad_check_report, relative_error, GradReport};
pub use gru::{gru_cell, GruParams};
pub use init::{uniform_init, InitRange};
pub use params::{ParamId, ParamStore, Parameter};
pub use sample::{gumbel_noise, gumbel_softmax, seeded_rng, Rng64};
pub use tape::{Tape, Var, LOG_CLAMP};

use ndarray::Array2;

use crate::error::{Error, Result};

/// Dense row-major `f64` matrix. Every value must be finite.
pub type NumArray = Array2<f64>;

/// Errors with `what` in the message if any entry is NaN or infinite.
pub fn check_finite(a: &NumArray, what: &str) -> Result<()> {
    match a.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numeric(format!(
            "non-finite value {} at flat index {i} of {what}",
            a.iter().nth(i).unwrap()
        ))),
        None => Ok(()),
    }
}

/// Exp-normalizes `scores` over the positions where `mask` is true.
///
/// Masked positions are excluded before exponentiation and come out exactly
/// zero. The maximum valid score is subtracted first.
pub fn masked_softmax(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; scores.len()];
    masked_softmax_into(scores, mask, &mut out)?;
    Ok(out)
}

pub(crate) fn masked_softmax_into(scores: &[f64], mask: &[bool], out: &mut [f64]) -> Result<()> {
    if scores.len() != mask.len() || out.len() != scores.len() {
        return Err(Error::config(format!(
            "softmax over {} scores with a mask of {}",
            scores.len(),
            mask.len()
        )));
    }
    if scores.iter().zip(mask).any(|(s, &m)| m && !s.is_finite()) {
        return Err(Error::Numeric("non-finite attention score".into()));
    }
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::InvalidInput(
            "softmax with every position masked".into(),
        ));
    }
    let mut total = 0.0;
    for ((o, &s), &m) in out.iter_mut().zip(scores).zip(mask) {
        *o = if m { (s - max).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}

/// `log_softmax` of a single vector.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|&v| v - lse).collect()
}

/// Negative log-likelihood of `target` under a log-distribution.
pub fn nll_loss(log_probs: &[f64], target: usize) -> Result<f64> {
    log_probs.get(target).map(|&lp| -lp).ok_or_else(|| {
        Error::InvalidInput(format!(
            "target {target} out of range for {} classes",
            log_probs.len()
        ))
    })
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}
