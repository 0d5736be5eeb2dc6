//! Combined task + AG loss, the training loop, model selection and metrics.

mod grid;
mod metrics;

use rand::seq::SliceRandom;

pub use grid::{grid_csv, grid_search, GridResult, GridSpace};
pub use metrics::{evaluate, metrics_csv, MetricsRecord, METRICS_HEADER};

use crate::error::{Error, Result};
use crate::model::{parse_num, Batch, Encoded, Model, StepTrace, StepVars};
use crate::numerics::{adam_step, clip_grad_norm, seeded_rng, AdamConfig, Rng64, Tape, Var, LOG_CLAMP};
use crate::tasks::{DatasetBundle, Example};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Split used for model selection; the task default when `None`.
    pub selection_split: Option<String>,
    pub eval_every: usize,
    /// Splits evaluated at each evaluation epoch; all when `None`.
    pub eval_splits: Option<Vec<String>>,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 0.001,
            epochs: 100,
            seed: 0,
            selection_split: None,
            eval_every: 1,
            eval_splits: None,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 8] = [
        "batch_size",
        "learning_rate",
        "epochs",
        "seed",
        "selection_split",
        "eval_every",
        "eval_splits",
        "clip_norm",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 {
            return Err(Error::config("batch_size, epochs and eval_every must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("bad learning rate {}", self.learning_rate)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// Sets one field from text; `none` clears optional fields. Returns
    /// `false` for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        let opt = |v: &str| (v != "none" && !v.is_empty()).then(|| v.to_string());
        match key {
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "selection_split" => self.selection_split = opt(v),
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "eval_splits" => {
                self.eval_splits = opt(v).map(|s| s.split(',').map(|x| x.trim().to_string()).collect())
            }
            "clip_norm" => self.clip_norm = opt(v).map(|s| parse_num(key, &s)).transpose()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.batch_size.to_string(),
            self.learning_rate.to_string(),
            self.epochs.to_string(),
            self.seed.to_string(),
            self.selection_split.clone().unwrap_or_else(|| "none".into()),
            self.eval_every.to_string(),
            self.eval_splits.as_ref().map_or_else(|| "none".into(), |s| s.join(",")),
            self.clip_norm.map_or_else(|| "none".into(), |c| c.to_string()),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }
}

/// Loss nodes of one batch. `task` and `ag` are unweighted means; `total`
/// is `λ_task·task + λ_ag·ag`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub task: Var,
    pub ag: Option<Var>,
}

/// Mean over rows of the per-row mean NLL of every target step (EOS included).
pub fn task_loss_var(tape: &mut Tape, batch: &Batch, steps: &[StepVars]) -> Result<Var> {
    let bsz = batch.len() as f64;
    let mut parts = Vec::with_capacity(steps.len());
    for (t, sv) in steps.iter().enumerate() {
        let (targets, weights): (Vec<usize>, Vec<f64>) = batch
            .target
            .iter()
            .map(|tg| match tg.get(t) {
                Some(&id) => (id, 1.0 / (tg.len() as f64 * bsz)),
                None => (0, 0.0),
            })
            .unzip();
        parts.push(tape.pick_neg(sv.log_probs, &targets, &weights)?);
    }
    tape.sum(&parts)
}

/// Mean over rows of `(1/T)·Σ_{t<T} −ln â_t[a_t]` over the `T` non-EOS
/// steps, computed on the attention rows `â` the model produced.
pub fn ag_loss_var(tape: &mut Tape, batch: &Batch, steps: &[StepVars]) -> Result<Var> {
    let ag = batch
        .ag
        .as_ref()
        .ok_or_else(|| Error::config("AG loss requested but the batch carries no attention targets"))?;
    let bsz = batch.len() as f64;
    let mut parts = Vec::with_capacity(steps.len());
    for (t, sv) in steps.iter().enumerate() {
        let (targets, weights): (Vec<usize>, Vec<f64>) = ag
            .iter()
            .zip(&batch.target)
            .map(|(a, tg)| {
                let real = tg.len() - 1;
                if t < real {
                    (a[t], 1.0 / (real as f64 * bsz))
                } else {
                    (0, 0.0)
                }
            })
            .unzip();
        parts.push(tape.pick_neg_log(sv.attention, &targets, &weights)?);
    }
    tape.sum(&parts)
}

/// Teacher-forced forward pass and combined loss of one batch.
pub fn batch_loss(
    model: &Model,
    tape: &mut Tape,
    batch: &Batch,
    noise_rng: Option<&mut Rng64>,
) -> Result<(LossVars, Encoded, Vec<StepVars>)> {
    let (enc, steps) = model.teacher_forced(tape, batch, noise_rng)?;
    let task = task_loss_var(tape, batch, &steps)?;
    let lt = model.config.loss_weight_task;
    let la = model.config.ag_weight();
    let weighted_task = tape.scale(task, lt);
    let (total, ag) = if la > 0.0 {
        let ag = ag_loss_var(tape, batch, &steps)?;
        let w = tape.scale(ag, la);
        (tape.add(weighted_task, w)?, Some(ag))
    } else {
        (weighted_task, None)
    };
    Ok((LossVars { total, task, ag }, enc, steps))
}

/// `(1/T)·Σ_t −ln max(â_t[a_t], 1e-12)` with `T = ag_target.len()`; traces
/// past `T` (the EOS step) are ignored.
pub fn ag_loss(traces: &[StepTrace], ag_target: &[usize]) -> Result<f64> {
    if ag_target.is_empty() {
        return Err(Error::config("AG loss needs attention targets"));
    }
    if traces.len() < ag_target.len() {
        return Err(Error::config(format!(
            "{} traces for {} attention targets",
            traces.len(),
            ag_target.len()
        )));
    }
    let mut total = 0.0;
    for (tr, &a) in traces.iter().zip(ag_target) {
        let w = tr.attention.weights.get(a).ok_or_else(|| {
            Error::InvalidInput(format!("attention target {a} outside {} positions", tr.attention.weights.len()))
        })?;
        total -= w.max(LOG_CLAMP).ln();
    }
    Ok(total / ag_target.len() as f64)
}

/// `λ_task·mean_t NLL + λ_ag·ag_loss` for one example; `target_ids` includes
/// the EOS id and aligns with `traces`.
pub fn combined_loss(
    traces: &[StepTrace],
    target_ids: &[usize],
    ag_target: &[usize],
    lambda_task: f64,
    lambda_ag: f64,
) -> Result<f64> {
    if traces.len() != target_ids.len() || target_ids.is_empty() {
        return Err(Error::config(format!(
            "{} traces for {} targets",
            traces.len(),
            target_ids.len()
        )));
    }
    let mut nll = 0.0;
    for (tr, &id) in traces.iter().zip(target_ids) {
        nll += crate::numerics::nll_loss(&tr.log_probs, id)?;
    }
    let task = nll / target_ids.len() as f64;
    if lambda_ag == 0.0 {
        return Ok(lambda_task * task);
    }
    Ok(lambda_task * task + lambda_ag * ag_loss(traces, ag_target)?)
}

/// Mean training losses of one epoch, weighted by batch size.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub task_loss: f64,
    pub ag_loss: Option<f64>,
}

/// Independent streams for shuffling and Gumbel noise, derived from the seed.
pub struct TrainRngs {
    pub shuffle: Rng64,
    pub noise: Rng64,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        TrainRngs {
            shuffle: seeded_rng(seed ^ 0x5348_5546_464c_4521),
            noise: seeded_rng(seed ^ 0x4755_4d42_454c_2121),
        }
    }
}

/// One pass over `examples`: seeded shuffle, padded batches, combined loss,
/// backward, optional clipping, Adam, zero grads.
pub fn train_epoch(
    model: &mut Model,
    examples: &[Example],
    cfg: &TrainConfig,
    rngs: &mut TrainRngs,
    epoch: usize,
) -> Result<EpochStats> {
    if examples.is_empty() {
        return Err(Error::config("empty training split"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rngs.shuffle);
    let adam = AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let with_ag = model.config.needs_ag_targets();
    let (mut task_sum, mut ag_sum) = (0.0, 0.0);
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let refs: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
        let batch = model.batch(&refs, with_ag)?;
        let mut tape = Tape::new();
        let (loss, _, _) = batch_loss(model, &mut tape, &batch, Some(&mut rngs.noise))?;
        let total = tape.scalar(loss.total);
        if !total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {total} at epoch {epoch}, batch {bi}")));
        }
        tape.backward(loss.total, &mut model.params)?;
        if let Some(c) = cfg.clip_norm {
            clip_grad_norm(&mut model.params, c);
        }
        adam_step(&mut model.params, &adam)?;
        model.params.zero_grad();
        let n = chunk.len() as f64;
        task_sum += tape.scalar(loss.task) * n;
        if let Some(ag) = loss.ag {
            ag_sum += tape.scalar(ag) * n;
        }
    }
    let n = examples.len() as f64;
    Ok(EpochStats {
        epoch,
        task_loss: task_sum / n,
        ag_loss: (model.config.ag_weight() > 0.0).then_some(ag_sum / n),
    })
}

/// Outcome of [`fit`].
#[derive(Clone, Debug)]
pub struct FitResult {
    /// Copy of the model at the selected epoch.
    pub best: Model,
    pub best_epoch: usize,
    pub selection_split: String,
    /// One record per (evaluated epoch, split).
    pub history: Vec<MetricsRecord>,
    pub epochs: Vec<EpochStats>,
}

impl FitResult {
    pub fn record(&self, split: &str, epoch: usize) -> Option<&MetricsRecord> {
        self.history.iter().find(|r| r.split == split && r.epoch == epoch)
    }

    /// Metrics of the selected checkpoint.
    pub fn best_records(&self) -> Vec<&MetricsRecord> {
        self.history.iter().filter(|r| r.epoch == self.best_epoch).collect()
    }
}

/// Called after every evaluated epoch with the epoch's training stats and
/// metrics.
pub type EpochCallback<'a> = dyn FnMut(&EpochStats, &[MetricsRecord]) + 'a;

/// Trains for `cfg.epochs`, evaluating every `eval_every` epochs (and the
/// last), and keeps the checkpoint with the best selection-split sequence
/// accuracy; ties go to the lower selection task loss, then the earlier epoch.
pub fn fit(
    mut model: Model,
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    mut on_epoch: Option<&mut EpochCallback<'_>>,
) -> Result<FitResult> {
    cfg.validate()?;
    let train = bundle.require_split("train")?;
    let selection = cfg
        .selection_split
        .clone()
        .unwrap_or_else(|| bundle.selection_split().to_string());
    bundle.require_split(&selection)?;
    let mut eval_names = cfg.eval_splits.clone().unwrap_or_else(|| bundle.split_names());
    if !eval_names.contains(&selection) {
        eval_names.push(selection.clone());
    }
    for n in &eval_names {
        bundle.require_split(n)?;
    }
    let grammar = match bundle.task {
        crate::tasks::TaskKind::SymbolRewriting => Some(bundle.grammar()?),
        crate::tasks::TaskKind::Lookup => None,
    };

    let mut rngs = TrainRngs::new(cfg.seed);
    let mut history = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(Model, usize, f64, f64)> = None;
    for epoch in 1..=cfg.epochs {
        let stats = train_epoch(&mut model, train, cfg, &mut rngs, epoch)?;
        epochs.push(stats.clone());
        if epoch % cfg.eval_every != 0 && epoch != cfg.epochs {
            continue;
        }
        let mut records = Vec::with_capacity(eval_names.len());
        for name in &eval_names {
            let exs = bundle.require_split(name)?;
            records.push(evaluate(&model, name, exs, epoch, cfg.batch_size, grammar.as_ref())?);
        }
        let sel = records.iter().find(|r| r.split == selection).expect("selection split evaluated");
        let better = match &best {
            None => true,
            Some((_, _, acc, loss)) => sel.seq_accuracy > *acc || (sel.seq_accuracy == *acc && sel.task_loss < *loss),
        };
        if better {
            best = Some((model.clone(), epoch, sel.seq_accuracy, sel.task_loss));
        }
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(&stats, &records);
        }
        history.extend(records);
    }
    let (best, best_epoch, _, _) = best.expect("at least one evaluation");
    Ok(FitResult {
        best,
        best_epoch,
        selection_split: selection,
        history,
        epochs,
    })
}
