use rand::Rng;

use super::{uniform_init, InitRange, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Parameters of one GRU layer with input size `I` and hidden size `H`.
///
/// Gate order along the `3H` axis is (update z, reset r, candidate h̃):
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// h̃  = tanh(W_h x + U_h (r ⊙ h) + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ h̃
/// ```
///
/// Stored as `{prefix}.w_x` `[3H×I]`, `{prefix}.u_zr` `[2H×H]`,
/// `{prefix}.u_h` `[H×H]` and `{prefix}.b` `[1×3H]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruParams {
    pub input_size: usize,
    pub hidden_size: usize,
    pub w_x: ParamId,
    pub u_zr: ParamId,
    pub u_h: ParamId,
    pub b: ParamId,
}

impl GruParams {
    pub fn create<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        init: InitRange,
        rng: &mut R,
    ) -> Result<Self> {
        let h = hidden_size;
        Ok(GruParams {
            input_size,
            hidden_size,
            w_x: store.add(format!("{prefix}.w_x"), uniform_init(3 * h, input_size, init, rng)?)?,
            u_zr: store.add(format!("{prefix}.u_zr"), uniform_init(2 * h, h, init, rng)?)?,
            u_h: store.add(format!("{prefix}.u_h"), uniform_init(h, h, init, rng)?)?,
            b: store.add(format!("{prefix}.b"), uniform_init(1, 3 * h, init, rng)?)?,
        })
    }

    /// Looks up existing parameters by prefix and validates their shapes.
    pub fn lookup(store: &ParamStore, prefix: &str, input_size: usize, hidden_size: usize) -> Result<Self> {
        let h = hidden_size;
        let get = |suffix: &str, shape: [usize; 2]| -> Result<ParamId> {
            let name = format!("{prefix}.{suffix}");
            let id = store
                .id(&name)
                .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))?;
            if store.get(id).shape() != shape {
                return Err(Error::config(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    store.get(id).shape()
                )));
            }
            Ok(id)
        };
        Ok(GruParams {
            input_size,
            hidden_size,
            w_x: get("w_x", [3 * h, input_size])?,
            u_zr: get("u_zr", [2 * h, h])?,
            u_h: get("u_h", [h, h])?,
            b: get("b", [1, 3 * h])?,
        })
    }

    pub fn scalar_count(input_size: usize, hidden_size: usize) -> usize {
        3 * hidden_size * input_size + 3 * hidden_size * hidden_size + 3 * hidden_size
    }
}

/// One GRU step for every row of `x` (`B×I`) and `h_prev` (`B×H`).
pub fn gru_cell(tape: &mut Tape, store: &ParamStore, p: &GruParams, x: Var, h_prev: Var) -> Result<Var> {
    let hs = p.hidden_size;
    if tape.value(x).ncols() != p.input_size || tape.value(h_prev).ncols() != hs {
        return Err(Error::config(format!(
            "gru expects input {} / hidden {}, got {} / {}",
            p.input_size,
            hs,
            tape.value(x).ncols(),
            tape.value(h_prev).ncols()
        )));
    }
    let w_x = tape.param(store, p.w_x);
    let u_zr = tape.param(store, p.u_zr);
    let u_h = tape.param(store, p.u_h);
    let b = tape.param(store, p.b);

    let gx = tape.matmul_t(x, w_x)?;
    let gx = tape.add_row(gx, b)?;
    let gx_zr = tape.cols(gx, 0, 2 * hs)?;
    let gx_h = tape.cols(gx, 2 * hs, hs)?;

    let gh_zr = tape.matmul_t(h_prev, u_zr)?;
    let zr = tape.add(gx_zr, gh_zr)?;
    let zr = tape.sigmoid(zr);
    let z = tape.cols(zr, 0, hs)?;
    let r = tape.cols(zr, hs, hs)?;

    let rh = tape.mul(r, h_prev)?;
    let gh_h = tape.matmul_t(rh, u_h)?;
    let cand = tape.add(gx_h, gh_h)?;
    let cand = tape.tanh(cand);

    // h' = h + z ⊙ (h̃ − h)
    let delta = tape.sub(cand, h_prev)?;
    let step = tape.mul(z, delta)?;
    tape.add(h_prev, step)
}
