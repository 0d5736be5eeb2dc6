use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::NumArray;
use crate::error::{Error, Result};

/// The RNG used everywhere: seeded, portable, instance-owned.
pub type Rng64 = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

fn standard_gumbel<R: Rng>(rng: &mut R) -> f64 {
    // u ∈ (0, 1); the open lower end keeps both logs finite.
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    -(-u.ln()).ln()
}

/// Matrix of i.i.d. standard Gumbel draws.
pub fn gumbel_noise<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> NumArray {
    let mut out = Array2::zeros((rows, cols));
    for v in out.iter_mut() {
        *v = standard_gumbel(rng);
    }
    out
}

/// `softmax((logits + g) / τ)` with `g` i.i.d. standard Gumbel.
pub fn gumbel_softmax<R: Rng>(logits: &[f64], temperature: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::config(format!(
            "gumbel temperature must be positive, got {temperature}"
        )));
    }
    let perturbed: Vec<f64> = logits
        .iter()
        .map(|&l| (l + standard_gumbel(rng)) / temperature)
        .collect();
    super::masked_softmax(&perturbed, &vec![true; logits.len()])
}
