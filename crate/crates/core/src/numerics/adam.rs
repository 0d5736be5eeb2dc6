use crate::error::{Error, Result};

use super::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter. Gradients are left in
/// place; nothing is modified if any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
    for p in store.iter() {
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter `{}`",
                p.name
            )));
        }
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = *cfg;
    for p in store.iter_mut() {
        p.step_count += 1;
        let t = p.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        ndarray::Zip::from(&mut p.value)
            .and(&p.grad)
            .and(&mut p.m)
            .and(&mut p.v)
            .for_each(|w, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for p in store.iter_mut() {
            p.grad *= factor;
        }
    }
    norm
}
