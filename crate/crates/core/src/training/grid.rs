//! Grid search over model sizes, attention variants and guidance.

use std::path::Path;

use rayon::prelude::*;

use super::{fit, metrics_csv, TrainConfig};
use crate::attention::{AlignmentKind, MechanismKind};
use crate::error::{Error, Result};
use crate::model::{count_parameters, Guidance, Model, ModelConfig};
use crate::tasks::DatasetBundle;

/// Axes of the search. Every combination is one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpace {
    pub embedding_sizes: Vec<usize>,
    pub hidden_sizes: Vec<usize>,
    pub alignments: Vec<AlignmentKind>,
    pub mechanisms: Vec<MechanismKind>,
    pub guidances: Vec<Guidance>,
    pub runs_per_cell: usize,
}

fn list<T: std::str::FromStr>(key: &str, v: &str, line: usize) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::config(format!("line {line}: bad `{key}` entry `{s}`")))
        })
        .collect()
}

impl GridSpace {
    /// Parses `key = a, b, c` lines; `#` starts a comment. Keys:
    /// `embedding_size`, `hidden_size`, `alignment`, `mechanism`, `guidance`,
    /// `runs`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut g = GridSpace {
            embedding_sizes: Vec::new(),
            hidden_sizes: Vec::new(),
            alignments: vec![AlignmentKind::Mlp],
            mechanisms: vec![MechanismKind::PreRnn],
            guidances: vec![Guidance::None, Guidance::Learned],
            runs_per_cell: 1,
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let no = i + 1;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {no}: expected `key = values`")))?;
            let k = k.trim();
            match k {
                "embedding_size" => g.embedding_sizes = list(k, v, no)?,
                "hidden_size" => g.hidden_sizes = list(k, v, no)?,
                "alignment" => g.alignments = list(k, v, no)?,
                "mechanism" => g.mechanisms = list(k, v, no)?,
                "guidance" => g.guidances = list(k, v, no)?,
                "runs" => {
                    g.runs_per_cell = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::config(format!("line {no}: bad run count")))?
                }
                other => return Err(Error::config(format!("line {no}: unknown key `{other}`"))),
            }
        }
        if g.cell_count() == 0 || g.runs_per_cell == 0 {
            return Err(Error::config("grid space is empty"));
        }
        Ok(g)
    }

    pub fn cell_count(&self) -> usize {
        self.embedding_sizes.len()
            * self.hidden_sizes.len()
            * self.alignments.len()
            * self.mechanisms.len()
            * self.guidances.len()
    }

    /// Model configurations of all cells, derived from `base`.
    pub fn cells(&self, base: &ModelConfig) -> Vec<ModelConfig> {
        let mut out = Vec::with_capacity(self.cell_count());
        for &e in &self.embedding_sizes {
            for &h in &self.hidden_sizes {
                for &a in &self.alignments {
                    for &m in &self.mechanisms {
                        for &g in &self.guidances {
                            out.push(ModelConfig {
                                embedding_size: e,
                                hidden_size: h,
                                alignment: a,
                                mechanism: m,
                                guidance: g,
                                ..base.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub run_id: String,
    pub config: ModelConfig,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    /// `(split, seq_acc)` at the selected epoch.
    pub seq_acc: Vec<(String, f64)>,
    /// `Err` text of a failed run.
    pub error: Option<String>,
}

fn run_id(c: &ModelConfig, run: usize) -> String {
    format!(
        "e{}_h{}_{}_{}_{}_r{run}",
        c.embedding_size, c.hidden_size, c.alignment, c.mechanism, c.guidance
    )
}

/// Trains every cell `runs_per_cell` times with seeds `train.seed + run`.
/// Cells run on `parallel` worker threads; a failing run is recorded and the
/// search continues. With `out_dir`, each run writes its metrics history
/// to `{out_dir}/{run_id}/metrics.csv`. Results are sorted by run id.
pub fn grid_search(
    space: &GridSpace,
    bundle: &DatasetBundle,
    base: &ModelConfig,
    train: &TrainConfig,
    parallel: usize,
    out_dir: Option<&Path>,
) -> Result<Vec<GridResult>> {
    let jobs: Vec<(ModelConfig, usize)> = space
        .cells(base)
        .into_iter()
        .flat_map(|c| (0..space.runs_per_cell).map(move |r| (c.clone(), r)))
        .collect();
    let run_one = |(cfg, r): &(ModelConfig, usize)| -> GridResult {
        let seed = train.seed + *r as u64;
        let id = run_id(cfg, *r);
        let outcome = (|| -> Result<(usize, Vec<(String, f64)>)> {
            let model = Model::new(cfg.clone(), bundle.source_vocab.clone(), bundle.target_vocab.clone(), seed)?;
            let tc = TrainConfig {
                seed,
                ..train.clone()
            };
            let fr = fit(model, bundle, &tc, None)?;
            if let Some(dir) = out_dir {
                let d = dir.join(&id);
                std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
                let p = d.join("metrics.csv");
                std::fs::write(&p, metrics_csv(&id, &fr.history)).map_err(|e| Error::io(&p, e))?;
            }
            let accs = fr
                .best_records()
                .iter()
                .map(|r| (r.split.clone(), r.seq_accuracy))
                .collect();
            Ok((fr.best_epoch, accs))
        })();
        let mut config = cfg.clone();
        config.source_vocab_size = bundle.source_vocab.len();
        config.target_vocab_size = bundle.target_vocab.len();
        match outcome {
            Ok((best_epoch, seq_acc)) => GridResult {
                run_id: id,
                config,
                seed,
                best_epoch: Some(best_epoch),
                seq_acc,
                error: None,
            },
            Err(e) => GridResult {
                run_id: id,
                config,
                seed,
                best_epoch: None,
                seq_acc: Vec::new(),
                error: Some(e.to_string()),
            },
        }
    };
    let mut results: Vec<GridResult> = if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| Error::config(format!("cannot start {parallel} workers: {e}")))?;
        pool.install(|| jobs.par_iter().map(run_one).collect())
    } else {
        jobs.iter().map(run_one).collect()
    };
    results.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(results)
}

/// One row per run: id, config echo, parameter count, seed, selected epoch,
/// status and sequence accuracy per split of `split_names`.
pub fn grid_csv(results: &[GridResult], split_names: &[String]) -> String {
    let keys: Vec<&str> = ModelConfig::KEYS.to_vec();
    let mut out = format!(
        "run_id,{},parameters,seed,best_epoch,status,{}\n",
        keys.join(","),
        split_names.iter().map(|s| format!("{s}_seq_acc")).collect::<Vec<_>>().join(",")
    );
    for r in results {
        let cfg: Vec<String> = r.config.pairs().into_iter().map(|(_, v)| v).collect();
        let status = match &r.error {
            None => "ok".to_string(),
            Some(e) => format!("error: {}", e.replace([',', '\n'], ";")),
        };
        let accs: Vec<String> = split_names
            .iter()
            .map(|s| {
                r.seq_acc
                    .iter()
                    .find(|(n, _)| n == s)
                    .map(|(_, a)| a.to_string())
                    .unwrap_or_default()
            })
            .collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.run_id,
            cfg.join(","),
            count_parameters(&r.config),
            r.seed,
            r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
            status,
            accs.join(",")
        ));
    }
    out
}
