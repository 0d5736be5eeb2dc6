//! GRU encoder–decoder with attention, batched on the tape.
//!
//! Batched entry points ([`Model::encode_batch`], [`Model::teacher_forced`],
//! [`Model::greedy_batch`]) work on id sequences of a [`Batch`]. The
//! single-example API ([`Model::encode`], [`Model::decode_teacher_forced`],
//! [`Model::greedy_decode`]) wraps them and returns plain numbers.

mod checkpoint;
mod config;

use ndarray::{Array2, Axis};

pub use checkpoint::{CHECKPOINT_BIN, CHECKPOINT_MANIFEST};
pub use config::{count_parameters, CellKind, Guidance, ModelConfig};
pub(crate) use config::parse_num;

use crate::attention::{
    attend, context_vector, full_focus_input, post_rnn_output, pre_rnn_input, Alignment, AlignmentKind,
    AttentionKeys, AttentionRow, MechanismKind, Normalizer,
};
use crate::error::{Error, Result};
use crate::numerics::{
    argmax, gru_cell, gumbel_noise, uniform_init, GruParams, InitRange, NumArray, ParamId, ParamStore, Rng64,
    Tape, Var,
};
use crate::tasks::{Example, Vocab};

#[derive(Clone, Debug, PartialEq)]
struct Ids {
    src_emb: ParamId,
    tgt_emb: ParamId,
    enc: GruParams,
    dec: GruParams,
    align: Alignment,
    w_f: Option<ParamId>,
    w_o: ParamId,
    b_o: ParamId,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub source_vocab: Vocab,
    pub target_vocab: Vocab,
    ids: Ids,
}

/// Padded id sequences. Targets end with EOS; `ag[b][t]` is the attention
/// target of step `t`, the EOS step repeating the last source index.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub source: Vec<Vec<usize>>,
    pub target: Vec<Vec<usize>>,
    pub ag: Option<Vec<Vec<usize>>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn source_len(&self) -> usize {
        self.source.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn target_len(&self) -> usize {
        self.target.iter().map(Vec::len).max().unwrap_or(0)
    }
}

fn source_mask(source: &[Vec<usize>]) -> Array2<bool> {
    let n = source.iter().map(Vec::len).max().unwrap_or(0);
    Array2::from_shape_fn((source.len(), n), |(b, i)| i < source[b].len())
}

/// Encoder states on a tape.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// One `B×H` node per source position.
    pub outputs: Vec<Var>,
    /// State after each row's last real token, `B×H`.
    pub final_state: Var,
    /// `B×N`, true at real tokens.
    pub mask: Array2<bool>,
    pub keys: AttentionKeys,
}

/// Nodes of one decoding step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    /// `B×V` log-probabilities.
    pub log_probs: Var,
    /// `B×N` computed attention `â`.
    pub attention: Var,
    /// `B×N` weights that formed the context; the oracle row under oracle
    /// guidance, else `attention`.
    pub used_attention: Var,
    pub context: Var,
    /// `B×H` decoder state `do_t`.
    pub state: Var,
}

/// Encoder output for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderResult {
    /// `N×H`, row `i` is `eo_i`.
    pub outputs: NumArray,
    pub final_state: Vec<f64>,
    pub source_mask: Vec<bool>,
}

/// Per-step outputs for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub log_probs: Vec<f64>,
    /// Computed attention.
    pub attention: AttentionRow,
    /// Weights that formed the context vector.
    pub used_attention: Vec<f64>,
    pub decoder_state: Vec<f64>,
}

/// Greedy output of one example; `tokens` excludes EOS, `steps` includes the
/// EOS step when one was emitted.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub steps: Vec<StepTrace>,
}

fn row(a: &NumArray, b: usize, width: usize) -> Vec<f64> {
    a.row(b).iter().take(width).copied().collect()
}

impl Model {
    /// Fresh model with parameters from `Uniform(±init_scale)` seeded by `seed`.
    /// Zero vocabulary sizes in `config` are filled in from the vocabularies.
    pub fn new(mut config: ModelConfig, source_vocab: Vocab, target_vocab: Vocab, seed: u64) -> Result<Self> {
        for (size, v) in [
            (&mut config.source_vocab_size, &source_vocab),
            (&mut config.target_vocab_size, &target_vocab),
        ] {
            if *size == 0 {
                *size = v.len();
            }
        }
        Self::check_vocabs(&config, &source_vocab, &target_vocab)?;
        config.validate()?;
        let mut rng = crate::numerics::seeded_rng(seed);
        let init = InitRange::symmetric(config.init_scale);
        let (e, h) = (config.embedding_size, config.hidden_size);
        let (vs, vt) = (config.source_vocab_size, config.target_vocab_size);
        let d = config.mechanism.decoder_input_size(e, h);
        let mut store = ParamStore::new();
        let rng = &mut rng;
        store.add("encoder.embedding", uniform_init(vs, e, init, rng)?)?;
        GruParams::create(&mut store, "encoder.gru", e, h, init, rng)?;
        store.add("decoder.embedding", uniform_init(vt, e, init, rng)?)?;
        GruParams::create(&mut store, "decoder.gru", d, h, init, rng)?;
        if config.alignment == AlignmentKind::Mlp {
            store.add("attention.w_c", uniform_init(h, 2 * h, init, rng)?)?;
            store.add("attention.w_s", uniform_init(1, h, init, rng)?)?;
        }
        if config.mechanism == MechanismKind::FullFocus {
            store.add("decoder.w_f", uniform_init(h, e + h, init, rng)?)?;
        }
        let out_width = if config.mechanism == MechanismKind::PostRnn { 2 * h } else { h };
        store.add("output.w", uniform_init(vt, out_width, init, rng)?)?;
        store.add("output.b", uniform_init(1, vt, init, rng)?)?;
        Self::from_params(config, source_vocab, target_vocab, store)
    }

    fn check_vocabs(config: &ModelConfig, source_vocab: &Vocab, target_vocab: &Vocab) -> Result<()> {
        if config.source_vocab_size != source_vocab.len() || config.target_vocab_size != target_vocab.len() {
            return Err(Error::Compat(format!(
                "config vocabulary sizes {}/{} differ from vocabularies {}/{}",
                config.source_vocab_size,
                config.target_vocab_size,
                source_vocab.len(),
                target_vocab.len()
            )));
        }
        if target_vocab.sos().is_none() || target_vocab.eos().is_none() {
            return Err(Error::config("target vocabulary lacks SOS/EOS"));
        }
        Ok(())
    }

    /// Assembles a model from existing parameters, checking every shape.
    pub fn from_params(config: ModelConfig, source_vocab: Vocab, target_vocab: Vocab, params: ParamStore) -> Result<Self> {
        config.validate()?;
        Self::check_vocabs(&config, &source_vocab, &target_vocab)?;
        let (e, h) = (config.embedding_size, config.hidden_size);
        let (vs, vt) = (config.source_vocab_size, config.target_vocab_size);
        let get = |name: &str, shape: [usize; 2]| -> Result<ParamId> {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Compat(format!("missing parameter `{name}`")))?;
            if params.get(id).shape() != shape {
                return Err(Error::Compat(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    params.get(id).shape()
                )));
            }
            Ok(id)
        };
        let mlp = config.alignment == AlignmentKind::Mlp;
        let ff = config.mechanism == MechanismKind::FullFocus;
        let out_width = if config.mechanism == MechanismKind::PostRnn { 2 * h } else { h };
        let d = config.mechanism.decoder_input_size(e, h);
        let ids = Ids {
            src_emb: get("encoder.embedding", [vs, e])?,
            tgt_emb: get("decoder.embedding", [vt, e])?,
            enc: GruParams::lookup(&params, "encoder.gru", e, h).map_err(|e| Error::Compat(e.to_string()))?,
            dec: GruParams::lookup(&params, "decoder.gru", d, h).map_err(|e| Error::Compat(e.to_string()))?,
            align: Alignment {
                kind: config.alignment,
                hidden_size: h,
                w_c: mlp.then(|| get("attention.w_c", [h, 2 * h])).transpose()?,
                w_s: mlp.then(|| get("attention.w_s", [1, h])).transpose()?,
            },
            w_f: ff.then(|| get("decoder.w_f", [h, e + h])).transpose()?,
            w_o: get("output.w", [vt, out_width])?,
            b_o: get("output.b", [1, vt])?,
        };
        let expected = count_parameters(&config);
        if params.scalar_count() != expected {
            return Err(Error::Compat(format!(
                "{} scalar parameters, configuration implies {expected}",
                params.scalar_count()
            )));
        }
        Ok(Model {
            config,
            params,
            source_vocab,
            target_vocab,
            ids,
        })
    }

    pub fn sos(&self) -> usize {
        self.target_vocab.sos().expect("checked at construction")
    }

    pub fn eos(&self) -> usize {
        self.target_vocab.eos().expect("checked at construction")
    }

    /// Encodes examples into a batch. With `with_ag`, every example must carry
    /// attention targets.
    pub fn batch(&self, examples: &[&Example], with_ag: bool) -> Result<Batch> {
        let eos = self.eos();
        let mut source = Vec::with_capacity(examples.len());
        let mut target = Vec::with_capacity(examples.len());
        let mut ag = Vec::new();
        for ex in examples {
            if ex.source.is_empty() {
                return Err(Error::data("empty source sequence"));
            }
            source.push(self.source_vocab.encode(&ex.source)?);
            let mut t = self.target_vocab.encode(&ex.target)?;
            t.push(eos);
            target.push(t);
            if with_ag {
                if !ex.has_ag() {
                    return Err(Error::config(format!(
                        "example `{}` has no attention targets",
                        ex.source.join(" ")
                    )));
                }
                ex.validate()?;
                ag.push(extend_ag(&ex.ag_target, ex.source.len()));
            }
        }
        Ok(Batch {
            source,
            target,
            ag: with_ag.then_some(ag),
        })
    }

    /// Runs the encoder over padded sources. Padded steps carry the previous
    /// state, so the final state is that of the last real token.
    pub fn encode_batch(&self, tape: &mut Tape, source: &[Vec<usize>]) -> Result<Encoded> {
        let b = source.len();
        let n = source.iter().map(Vec::len).max().unwrap_or(0);
        if b == 0 || source.iter().any(Vec::is_empty) {
            return Err(Error::InvalidInput("cannot encode an empty sequence".into()));
        }
        let emb = tape.param(&self.params, self.ids.src_emb);
        let mut h = tape.input(Array2::zeros((b, self.config.hidden_size)));
        let mut outputs = Vec::with_capacity(n);
        for i in 0..n {
            let ids: Vec<usize> = source.iter().map(|s| s.get(i).copied().unwrap_or(0)).collect();
            let x = tape.gather(emb, &ids)?;
            let next = gru_cell(tape, &self.params, &self.ids.enc, x, h)?;
            let live: Vec<bool> = source.iter().map(|s| i < s.len()).collect();
            h = if live.iter().all(|&l| l) {
                next
            } else {
                tape.select(&live, next, h)?
            };
            outputs.push(h);
        }
        let keys = self.ids.align.prepare(tape, &self.params, &outputs)?;
        Ok(Encoded {
            outputs,
            final_state: h,
            mask: source_mask(source),
            keys,
        })
    }

    fn one_hot(&self, b: usize, n: usize, cols: &[usize]) -> Result<NumArray> {
        let mut out = Array2::zeros((b, n));
        for (r, &c) in cols.iter().enumerate() {
            if c >= n {
                return Err(Error::data(format!("attention target {c} outside source of length {n}")));
            }
            out[[r, c]] = 1.0;
        }
        Ok(out)
    }

    /// One decoding step from state `prev` with input tokens `input_ids`.
    ///
    /// `oracle` holds one source index per row and is required under oracle
    /// guidance. `noise_rng` switches the Gumbel normalizer on (training).
    pub fn step(
        &self,
        tape: &mut Tape,
        enc: &Encoded,
        prev: Var,
        input_ids: &[usize],
        oracle: Option<&[usize]>,
        noise_rng: Option<&mut Rng64>,
    ) -> Result<StepVars> {
        let (b, n) = enc.mask.dim();
        let normalizer = match (self.config.guidance, noise_rng) {
            (Guidance::Gumbel, Some(rng)) => Normalizer::Gumbel {
                noise: gumbel_noise(b, n, rng),
                temperature: self.config.gumbel_temperature,
            },
            _ => Normalizer::Softmax,
        };
        let oracle_row = match (self.config.guidance, oracle) {
            (Guidance::Oracle, Some(cols)) => Some(self.one_hot(b, n, cols)?),
            (Guidance::Oracle, None) => {
                return Err(Error::config("oracle guidance requires attention targets"));
            }
            _ => None,
        };
        let attend_at = |tape: &mut Tape, query: Var| -> Result<(Var, Var, Var)> {
            let attn = attend(tape, &self.params, &self.ids.align, &enc.keys, query, &enc.mask, &normalizer)?;
            let used = match &oracle_row {
                Some(o) => tape.input(o.clone()),
                None => attn,
            };
            let c = context_vector(tape, used, &enc.keys.values)?;
            Ok((attn, used, c))
        };

        let emb = tape.param(&self.params, self.ids.tgt_emb);
        let de = tape.gather(emb, input_ids)?;
        let w_o = tape.param(&self.params, self.ids.w_o);
        let b_o = tape.param(&self.params, self.ids.b_o);
        let (attention, used_attention, context, state, log_probs) = match self.config.mechanism {
            MechanismKind::PreRnn | MechanismKind::FullFocus => {
                let (attn, used, c) = attend_at(tape, prev)?;
                let di = if self.config.mechanism == MechanismKind::PreRnn {
                    pre_rnn_input(tape, de, c)?
                } else {
                    let w_f = tape.param(&self.params, self.ids.w_f.expect("full focus has W_f"));
                    full_focus_input(tape, de, c, w_f)?
                };
                let state = gru_cell(tape, &self.params, &self.ids.dec, di, prev)?;
                let logits = tape.affine(w_o, Some(b_o), state)?;
                (attn, used, c, state, tape.log_softmax(logits))
            }
            MechanismKind::PostRnn => {
                let state = gru_cell(tape, &self.params, &self.ids.dec, de, prev)?;
                let (attn, used, c) = attend_at(tape, state)?;
                let lp = post_rnn_output(tape, state, c, w_o, Some(b_o))?;
                (attn, used, c, state, lp)
            }
        };
        Ok(StepVars {
            log_probs,
            attention,
            used_attention,
            context,
            state,
        })
    }

    /// Teacher-forced pass: step `t` consumes SOS (t = 0) or gold token
    /// `t − 1`. Rows shorter than the batch feed EOS past their end.
    pub fn teacher_forced(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        mut noise_rng: Option<&mut Rng64>,
    ) -> Result<(Encoded, Vec<StepVars>)> {
        if batch.target.iter().any(Vec::is_empty) {
            return Err(Error::InvalidInput("target length must be ≥ 1".into()));
        }
        if self.config.guidance == Guidance::Oracle && batch.ag.is_none() {
            return Err(Error::config("oracle guidance requires attention targets"));
        }
        let enc = self.encode_batch(tape, &batch.source)?;
        let (sos, eos) = (self.sos(), self.eos());
        let mut prev = enc.final_state;
        let mut steps = Vec::with_capacity(batch.target_len());
        for t in 0..batch.target_len() {
            let inputs: Vec<usize> = batch
                .target
                .iter()
                .map(|tg| if t == 0 { sos } else { tg.get(t - 1).copied().unwrap_or(eos) })
                .collect();
            let oracle: Option<Vec<usize>> = batch
                .ag
                .as_ref()
                .map(|ag| ag.iter().map(|a| a[t.min(a.len() - 1)]).collect());
            let sv = self.step(tape, &enc, prev, &inputs, oracle.as_deref(), noise_rng.as_deref_mut())?;
            prev = sv.state;
            steps.push(sv);
        }
        Ok((enc, steps))
    }

    fn trace(&self, tape: &Tape, sv: &StepVars, b: usize, n: usize) -> StepTrace {
        let query_state = self.config.mechanism.query_state();
        let v = self.config.target_vocab_size;
        StepTrace {
            log_probs: row(tape.value(sv.log_probs), b, v),
            attention: AttentionRow {
                weights: row(tape.value(sv.attention), b, n),
                query_state,
            },
            used_attention: row(tape.value(sv.used_attention), b, n),
            decoder_state: row(tape.value(sv.state), b, self.config.hidden_size),
        }
    }

    /// Per-example traces of a teacher-forced pass, cut to each example's
    /// source and target lengths.
    pub fn traces(&self, tape: &Tape, batch: &Batch, steps: &[StepVars]) -> Vec<Vec<StepTrace>> {
        (0..batch.len())
            .map(|b| {
                let n = batch.source[b].len();
                steps[..batch.target[b].len()]
                    .iter()
                    .map(|sv| self.trace(tape, sv, b, n))
                    .collect()
            })
            .collect()
    }

    /// Greedy decoding of a batch: each next input is the argmax of the
    /// previous step; a row stops at EOS or after `max_len` steps.
    /// `oracle[b]` lists per-step attention targets (last one reused).
    pub fn greedy_batch(&self, source: &[Vec<usize>], oracle: Option<&[Vec<usize>]>, max_len: usize) -> Result<Vec<Decoded>> {
        if self.config.guidance == Guidance::Oracle && oracle.is_none() {
            return Err(Error::config("oracle guidance requires attention targets"));
        }
        let mut tape = Tape::new();
        let enc = self.encode_batch(&mut tape, source)?;
        let (sos, eos) = (self.sos(), self.eos());
        let b = source.len();
        let mut out: Vec<Decoded> = vec![
            Decoded {
                tokens: Vec::new(),
                steps: Vec::new(),
            };
            b
        ];
        let mut done = vec![false; b];
        let mut inputs = vec![sos; b];
        let mut prev = enc.final_state;
        for t in 0..max_len {
            if done.iter().all(|&d| d) {
                break;
            }
            let cols: Option<Vec<usize>> = oracle.map(|o| o.iter().map(|a| a[t.min(a.len() - 1)]).collect());
            let sv = self.step(&mut tape, &enc, prev, &inputs, cols.as_deref(), None)?;
            let lp = tape.value(sv.log_probs);
            for r in 0..b {
                if done[r] {
                    inputs[r] = eos;
                    continue;
                }
                let next = argmax(lp.row(r).as_slice().expect("row-major"));
                out[r].steps.push(self.trace(&tape, &sv, r, source[r].len()));
                if next == eos {
                    done[r] = true;
                } else {
                    out[r].tokens.push(next);
                }
                inputs[r] = next;
            }
            prev = sv.state;
        }
        Ok(out)
    }

    /// Encodes one source sequence.
    pub fn encode(&self, source_tokens: &[String]) -> Result<EncoderResult> {
        let ids = self.source_vocab.encode(source_tokens)?;
        let mut tape = Tape::new();
        let enc = self.encode_batch(&mut tape, &[ids])?;
        let views: Vec<_> = enc.outputs.iter().map(|&o| tape.value(o).view()).collect();
        let outputs = ndarray::concatenate(Axis(0), &views).expect("equal widths");
        Ok(EncoderResult {
            outputs,
            final_state: tape.value(enc.final_state).row(0).to_vec(),
            source_mask: vec![true; source_tokens.len()],
        })
    }

    fn encoded_from(&self, tape: &mut Tape, enc: &EncoderResult) -> Result<Encoded> {
        if enc.outputs.nrows() == 0 || enc.outputs.ncols() != self.config.hidden_size {
            return Err(Error::config(format!(
                "encoder outputs are {}x{}, hidden size is {}",
                enc.outputs.nrows(),
                enc.outputs.ncols(),
                self.config.hidden_size
            )));
        }
        let outputs: Vec<Var> = enc
            .outputs
            .rows()
            .into_iter()
            .map(|r| tape.input(r.to_owned().insert_axis(Axis(0))))
            .collect();
        let final_state = tape.input(Array2::from_shape_vec((1, enc.final_state.len()), enc.final_state.clone()).map_err(|e| Error::config(e.to_string()))?);
        let keys = self.ids.align.prepare(tape, &self.params, &outputs)?;
        Ok(Encoded {
            outputs,
            final_state,
            mask: Array2::from_shape_vec((1, enc.source_mask.len()), enc.source_mask.clone())
                .map_err(|e| Error::config(e.to_string()))?,
            keys,
        })
    }

    /// Teacher-forced decoding of one example. `target_tokens` excludes EOS;
    /// one trace is returned per target token plus the EOS step.
    pub fn decode_teacher_forced(
        &self,
        enc: &EncoderResult,
        target_tokens: &[String],
        oracle_targets: Option<&[usize]>,
    ) -> Result<Vec<StepTrace>> {
        if self.config.guidance == Guidance::Oracle && oracle_targets.is_none() {
            return Err(Error::config("oracle guidance requires attention targets"));
        }
        let mut ids = self.target_vocab.encode(target_tokens)?;
        ids.push(self.eos());
        let mut tape = Tape::new();
        let e = self.encoded_from(&mut tape, enc)?;
        let ag = oracle_targets.map(|a| extend_ag(a, enc.outputs.nrows()));
        let mut prev = e.final_state;
        let mut out = Vec::with_capacity(ids.len());
        for t in 0..ids.len() {
            let input = if t == 0 { self.sos() } else { ids[t - 1] };
            let col = ag.as_ref().map(|a| [a[t.min(a.len() - 1)]]);
            let sv = self.step(&mut tape, &e, prev, &[input], col.as_ref().map(|c| &c[..]), None)?;
            out.push(self.trace(&tape, &sv, 0, enc.outputs.nrows()));
            prev = sv.state;
        }
        Ok(out)
    }

    /// Greedy decoding of one example; tokens exclude EOS.
    pub fn greedy_decode(
        &self,
        enc: &EncoderResult,
        max_len: usize,
        oracle_targets: Option<&[usize]>,
    ) -> Result<(Vec<String>, Vec<StepTrace>)> {
        if self.config.guidance == Guidance::Oracle && oracle_targets.is_none() {
            return Err(Error::config("oracle guidance requires attention targets"));
        }
        let mut tape = Tape::new();
        let e = self.encoded_from(&mut tape, enc)?;
        let ag = oracle_targets.map(|a| extend_ag(a, enc.outputs.nrows()));
        let (eos, mut input) = (self.eos(), self.sos());
        let mut prev = e.final_state;
        let (mut tokens, mut steps) = (Vec::new(), Vec::new());
        for t in 0..max_len {
            let col = ag.as_ref().map(|a| [a[t.min(a.len() - 1)]]);
            let sv = self.step(&mut tape, &e, prev, &[input], col.as_ref().map(|c| &c[..]), None)?;
            steps.push(self.trace(&tape, &sv, 0, enc.outputs.nrows()));
            input = argmax(tape.value(sv.log_probs).row(0).as_slice().expect("row-major"));
            if input == eos {
                break;
            }
            tokens.push(self.target_vocab.token(input).to_string());
            prev = sv.state;
        }
        Ok((tokens, steps))
    }
}

/// Attention targets for every decoding step: the given ones, then the EOS
/// step repeating the last index. Empty input yields the final source
/// position.
pub fn extend_ag(ag: &[usize], source_len: usize) -> Vec<usize> {
    let mut out = ag.to_vec();
    out.push(ag.last().copied().unwrap_or(source_len.saturating_sub(1)));
    out
}
