use super::{ParamStore, Tape, Var};
use crate::error::Result;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Worst disagreement found by [`grad_check_report`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradReport {
    pub max_relative: f64,
    pub max_absolute: f64,
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `h`, over every coordinate of every
/// parameter in `store`. Returns the largest relative error.
///
/// `f` must be deterministic: it is re-run twice per coordinate.
pub fn grad_check<F>(store: &mut ParamStore, h: f64, f: F) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    Ok(grad_check_report(store, h, f)?.max_relative)
}

/// Like [`grad_check`], also tracking the largest absolute difference.
/// Central differences of a loss near 1 carry about `1e-11` of round-off at
/// `h = 1e-5`, which dominates the relative error of near-zero coordinates.
pub fn grad_check_report<F>(store: &mut ParamStore, h: f64, mut f: F) -> Result<GradReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.iter().copied().collect()).collect();

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let v = f(store, &mut tape)?;
        Ok(tape.scalar(v))
    };

    let mut worst = GradReport::default();
    let ids: Vec<_> = (0..store.len()).map(super::ParamId).collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).value.as_slice().unwrap()[k];
            store.get_mut(id).value.as_slice_mut().unwrap()[k] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).value.as_slice_mut().unwrap()[k] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).value.as_slice_mut().unwrap()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][k];
            worst.max_relative = worst.max_relative.max(relative_error(a, numeric));
            worst.max_absolute = worst.max_absolute.max((a - numeric).abs());
        }
    }
    Ok(worst)
}
