use super::{ag_loss_var, task_loss_var};
use crate::error::Result;
use crate::model::{extend_ag, Guidance, Model};
use crate::numerics::{argmax, Tape};
use crate::tasks::{grammar_consistent, Example, Grammar};

pub const METRICS_HEADER: &str = "run_id,split,epoch,task_loss,ag_loss,seq_acc,token_acc,attn_acc";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub split: String,
    pub epoch: usize,
    /// Teacher-forced mean per-token NLL, averaged over examples.
    pub task_loss: f64,
    /// AG loss of the computed attention; `None` without attention targets.
    pub ag_loss: Option<f64>,
    /// Exact match of the greedy output.
    pub seq_accuracy: f64,
    /// Teacher-forced per-position argmax match rate, EOS included.
    pub token_accuracy: f64,
    /// Fraction of non-EOS steps whose context weights peak at the target.
    pub attn_accuracy: Option<f64>,
    /// Fraction of greedy outputs accepted by the grammar (symbol rewriting).
    pub grammar_accuracy: Option<f64>,
}

/// Metrics of `model` on `examples`. Sequence and grammar accuracy use
/// greedy decoding; the rest is measured under teacher forcing.
pub fn evaluate(
    model: &Model,
    split: &str,
    examples: &[Example],
    epoch: usize,
    batch_size: usize,
    grammar: Option<&Grammar>,
) -> Result<MetricsRecord> {
    let with_ag = !examples.is_empty() && examples.iter().all(Example::has_ag);
    let (mut task_sum, mut ag_sum) = (0.0, 0.0);
    let (mut tok_ok, mut tok_n) = (0usize, 0usize);
    let (mut attn_ok, mut attn_n) = (0usize, 0usize);
    let (mut seq_ok, mut gram_ok) = (0usize, 0usize);
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = model.batch(&refs, with_ag)?;
        let n = chunk.len() as f64;

        let mut tape = Tape::new();
        let (_, steps) = model.teacher_forced(&mut tape, &batch, None)?;
        let task = task_loss_var(&mut tape, &batch, &steps)?;
        task_sum += tape.scalar(task) * n;
        if with_ag {
            let ag = ag_loss_var(&mut tape, &batch, &steps)?;
            ag_sum += tape.scalar(ag) * n;
        }
        for (t, sv) in steps.iter().enumerate() {
            let lp = tape.value(sv.log_probs);
            let used = tape.value(sv.used_attention);
            for (b, tg) in batch.target.iter().enumerate() {
                if t >= tg.len() {
                    continue;
                }
                tok_n += 1;
                tok_ok += (argmax(lp.row(b).as_slice().expect("row-major")) == tg[t]) as usize;
                if let Some(ag) = &batch.ag {
                    if t + 1 < tg.len() {
                        attn_n += 1;
                        attn_ok += (argmax(used.row(b).as_slice().expect("row-major")) == ag[b][t]) as usize;
                    }
                }
            }
        }

        let oracle: Option<Vec<Vec<usize>>> = (model.config.guidance == Guidance::Oracle)
            .then(|| chunk.iter().map(|e| extend_ag(&e.ag_target, e.source.len())).collect());
        let decoded = model.greedy_batch(&batch.source, oracle.as_deref(), model.config.max_decode_length)?;
        for ((d, tg), ex) in decoded.iter().zip(&batch.target).zip(chunk) {
            seq_ok += (d.tokens[..] == tg[..tg.len() - 1]) as usize;
            if let Some(g) = grammar {
                let out = model.target_vocab.decode(&d.tokens);
                gram_ok += grammar_consistent(&ex.source, &out, g) as usize;
            }
        }
    }
    let n = examples.len().max(1) as f64;
    let ratio = |ok: usize, total: usize| if total == 0 { 0.0 } else { ok as f64 / total as f64 };
    Ok(MetricsRecord {
        split: split.to_string(),
        epoch,
        task_loss: task_sum / n,
        ag_loss: with_ag.then_some(ag_sum / n),
        seq_accuracy: seq_ok as f64 / n,
        token_accuracy: ratio(tok_ok, tok_n),
        attn_accuracy: with_ag.then(|| ratio(attn_ok, attn_n)),
        grammar_accuracy: grammar.map(|_| gram_ok as f64 / n),
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Metrics history CSV with [`METRICS_HEADER`]; absent values are empty
/// fields. Values use shortest round-trip formatting.
pub fn metrics_csv(run_id: &str, records: &[MetricsRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{run_id},{},{},{},{},{},{},{}\n",
            r.split,
            r.epoch,
            r.task_loss,
            opt(r.ag_loss),
            r.seq_accuracy,
            r.token_accuracy,
            opt(r.attn_accuracy)
        ));
    }
    out
}
