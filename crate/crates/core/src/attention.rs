//! Alignment scoring, masked normalization, context vectors and the three
//! ways a context vector enters the decoder.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::numerics::{NumArray, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AlignmentKind {
    /// `⟨eo_i, do⟩`
    Dot,
    /// `W_s · relu(W_c · [eo_i; do])`
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MechanismKind {
    /// Attend with `do_{t−1}`, feed `[de_t; c_t]` to the decoder cell.
    PreRnn,
    /// Attend with `do_t`, feed `[do_t; c_t]` to the output layer.
    PostRnn,
    /// Attend with `do_{t−1}`, feed `c_t ⊙ relu(W_f [de_t; c_t])` to the cell.
    FullFocus,
}

impl MechanismKind {
    /// Which decoder state queries the attention.
    pub fn query_state(self) -> QueryState {
        match self {
            MechanismKind::PreRnn | MechanismKind::FullFocus => QueryState::Previous,
            MechanismKind::PostRnn => QueryState::Current,
        }
    }

    /// Input width of the decoder cell for embedding size `e`, hidden `h`.
    pub fn decoder_input_size(self, e: usize, h: usize) -> usize {
        match self {
            MechanismKind::PreRnn => e + h,
            MechanismKind::FullFocus => h,
            MechanismKind::PostRnn => e,
        }
    }
}

/// The decoder state an attention row was computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryState {
    /// `do_{t−1}`
    Previous,
    /// `do_t`
    Current,
}

/// Attention weights over source positions for one decoding step.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRow {
    pub weights: Vec<f64>,
    pub query_state: QueryState,
}

impl AttentionRow {
    pub fn argmax(&self) -> usize {
        crate::numerics::argmax(&self.weights)
    }
}

macro_rules! string_enum {
    ($ty:ty, $what:literal, $($variant:path => $name:literal),+ $(,)?) => {
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }

        impl std::str::FromStr for $ty {
            type Err = $crate::error::Error;

            fn from_str(s: &str) -> $crate::error::Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err($crate::error::Error::config(format!(
                        concat!("unknown ", $what, " `{}` (expected one of: {})"),
                        other,
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
    };
}
pub(crate) use string_enum;

string_enum!(AlignmentKind, "alignment", AlignmentKind::Dot => "dot", AlignmentKind::Mlp => "mlp");
string_enum!(
    MechanismKind,
    "mechanism",
    MechanismKind::PreRnn => "pre_rnn",
    MechanismKind::PostRnn => "post_rnn",
    MechanismKind::FullFocus => "full_focus",
);

/// `W_s · relu(W_c · [eo; do])` for every row. `W_c` is `H×2H`, `W_s` is
/// stored as a `1×H` row.
pub fn mlp_score(tape: &mut Tape, eo: Var, query: Var, w_c: Var, w_s: Var) -> Result<Var> {
    let h = tape.value(eo).ncols();
    if tape.value(query).ncols() != h
        || tape.value(w_c).dim() != (h, 2 * h)
        || tape.value(w_s).dim() != (1, h)
    {
        return Err(Error::config(format!(
            "mlp score shapes: eo {:?}, do {:?}, W_c {:?}, W_s {:?}",
            tape.value(eo).dim(),
            tape.value(query).dim(),
            tape.value(w_c).dim(),
            tape.value(w_s).dim()
        )));
    }
    let joint = tape.concat(&[eo, query])?;
    let hidden = tape.matmul_t(joint, w_c)?;
    let hidden = tape.relu(hidden);
    tape.matmul_t(hidden, w_s)
}

/// Inner product of each row pair.
pub fn dot_score(tape: &mut Tape, eo: Var, query: Var) -> Result<Var> {
    if tape.value(eo).dim() != tape.value(query).dim() {
        return Err(Error::config(format!(
            "dot score dims differ: {:?} vs {:?}",
            tape.value(eo).dim(),
            tape.value(query).dim()
        )));
    }
    tape.dot_scores(&[eo], query)
}

/// Alignment parameters. `w_c` and `w_s` exist only for MLP alignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub kind: AlignmentKind,
    pub hidden_size: usize,
    pub w_c: Option<ParamId>,
    pub w_s: Option<ParamId>,
}

/// Per-position keys prepared once per encoder pass.
///
/// For MLP alignment the key of position `i` is `eo_i · W_c[:, :H]ᵀ`, so each
/// step only projects the query; for dot alignment it is `eo_i` itself.
#[derive(Clone, Debug)]
pub struct AttentionKeys {
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

impl Alignment {
    pub fn prepare(&self, tape: &mut Tape, store: &ParamStore, encoder_outputs: &[Var]) -> Result<AttentionKeys> {
        let keys = match self.kind {
            AlignmentKind::Dot => encoder_outputs.to_vec(),
            AlignmentKind::Mlp => {
                let w_c = tape.param(store, self.w_c.expect("mlp alignment has W_c"));
                let w_enc = tape.cols(w_c, 0, self.hidden_size)?;
                encoder_outputs
                    .iter()
                    .map(|&eo| tape.matmul_t(eo, w_enc))
                    .collect::<Result<_>>()?
            }
        };
        Ok(AttentionKeys {
            keys,
            values: encoder_outputs.to_vec(),
        })
    }

    /// Unnormalized scores `B×N` for `query` (`B×H`).
    pub fn scores(&self, tape: &mut Tape, store: &ParamStore, keys: &AttentionKeys, query: Var) -> Result<Var> {
        match self.kind {
            AlignmentKind::Dot => tape.dot_scores(&keys.keys, query),
            AlignmentKind::Mlp => {
                let w_c = tape.param(store, self.w_c.expect("mlp alignment has W_c"));
                let w_dec = tape.cols(w_c, self.hidden_size, self.hidden_size)?;
                let w_s = tape.param(store, self.w_s.expect("mlp alignment has W_s"));
                let q = tape.matmul_t(query, w_dec)?;
                tape.additive_scores(&keys.keys, q, w_s)
            }
        }
    }
}

/// Normalization applied to alignment scores.
#[derive(Clone, Debug)]
pub enum Normalizer {
    Softmax,
    /// `softmax((scores + noise) / τ)`; `noise` holds standard Gumbel draws.
    Gumbel { noise: NumArray, temperature: f64 },
}

/// Scores every valid position and normalizes: the attention weights `â`.
pub fn attend(
    tape: &mut Tape,
    store: &ParamStore,
    alignment: &Alignment,
    keys: &AttentionKeys,
    query: Var,
    mask: &Array2<bool>,
    normalizer: &Normalizer,
) -> Result<Var> {
    let scores = alignment.scores(tape, store, keys, query)?;
    match normalizer {
        Normalizer::Softmax => tape.masked_softmax(scores, mask, 1.0),
        Normalizer::Gumbel { noise, temperature } => {
            if !(*temperature > 0.0) {
                return Err(Error::config("gumbel temperature must be positive"));
            }
            let n = tape.input(noise.clone());
            let perturbed = tape.add(scores, n)?;
            tape.masked_softmax(perturbed, mask, 1.0 / temperature)
        }
    }
}

/// `c = Σ_i w_i · eo_i` per row.
pub fn context_vector(tape: &mut Tape, weights: Var, encoder_outputs: &[Var]) -> Result<Var> {
    tape.weighted_sum(weights, encoder_outputs)
}

/// `[de_t; c]`, embedding first.
pub fn pre_rnn_input(tape: &mut Tape, de: Var, context: Var) -> Result<Var> {
    tape.concat(&[de, context])
}

/// `c ⊙ relu(W_f · [de_t; c])`, width `H`.
pub fn full_focus_input(tape: &mut Tape, de: Var, context: Var, w_f: Var) -> Result<Var> {
    let joint = tape.concat(&[de, context])?;
    let h = tape.value(context).ncols();
    if tape.value(w_f).dim() != (h, tape.value(joint).ncols()) {
        return Err(Error::config(format!(
            "W_f is {:?}, expected ({h}, {})",
            tape.value(w_f).dim(),
            tape.value(joint).ncols()
        )));
    }
    let gate = tape.matmul_t(joint, w_f)?;
    let gate = tape.relu(gate);
    tape.mul(context, gate)
}

/// `log_softmax(W_o · [do_t; c] + b_o)`.
pub fn post_rnn_output(tape: &mut Tape, state: Var, context: Var, w_o: Var, b_o: Option<Var>) -> Result<Var> {
    let joint = tape.concat(&[state, context])?;
    let logits = tape.affine(w_o, b_o, joint)?;
    Ok(tape.log_softmax(logits))
}
