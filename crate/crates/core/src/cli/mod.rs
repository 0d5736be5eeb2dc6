//! Command-line front end. Every command maps its failure to the exit code
//! of [`Error::exit_code`]; usage errors exit with 2.

mod config_file;
mod heatmap;
mod manifest;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config_file::RunConfig;
pub use heatmap::{attention_csv, attention_pgm, pixel};
pub use manifest::{dir_checksums, sha256_hex, RunManifest, MANIFEST_FILE};

use crate::error::{Error, Result};
use crate::model::{Guidance, Model};
use crate::numerics::seeded_rng;
use crate::tasks::{
    build_lookup_splits, build_sr_splits, dataset_stats, generate_grammar, longer_compositions, read_tsv,
    stats_csv, write_tsv, DatasetBundle, LookupTaskSpec, SymbolRewritingSpec, TaskKind,
};
use crate::training::{evaluate, fit, grid_csv, grid_search, metrics_csv, GridSpace, MetricsRecord};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "ATTNGUIDE_OUT";
pub const STATS_FILE: &str = "stats.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const GRID_FILE: &str = "grid.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Parser, Debug)]
#[command(name = "attnguide", version, about = "Seq2seq models with attention guidance on compositional tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a dataset directory.
    GenData(GenDataArgs),
    /// Train one model and keep the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on dataset splits.
    Eval(EvalArgs),
    /// Export the attention matrix of one example.
    PlotAttention(PlotArgs),
    /// Train every cell of a search space.
    GridSearch(GridArgs),
    /// Per-split composition or length histograms.
    Stats(StatsArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskArg {
    Lookup,
    Sr,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    pub task: TaskArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; defaults to `$ATTNGUIDE_OUT/data-{task}-s{seed}`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Generator setting override `key=value`, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Symbol rewriting training set size.
    #[arg(long)]
    pub train_size: Option<usize>,
    /// Symbol rewriting at the original 100k training size.
    #[arg(long)]
    pub paper_scale: bool,
    /// Extra lookup split `len{L}` of longer compositions, repeatable.
    #[arg(long = "longer", value_name = "L")]
    pub longer: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub longer_count: usize,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Setting override `key=value`, repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub guidance: Option<Guidance>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut rc = RunConfig::default();
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            rc.apply_text(&text)?;
        }
        for kv in &self.overrides {
            rc.apply_override(kv)?;
        }
        if let Some(g) = self.guidance {
            rc.model.guidance = g;
        }
        if let Some(s) = self.seed {
            rc.train.seed = s;
        }
        if let Some(e) = self.epochs {
            rc.train.epochs = e;
        }
        rc.model.validate()?;
        rc.train.validate()?;
        Ok(rc)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Run directory; defaults to `$ATTNGUIDE_OUT/{run_id}`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// No per-epoch progress on stderr.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Split to evaluate, repeatable; all splits when absent.
    #[arg(long)]
    pub split: Vec<String>,
    /// Metrics CSV destination.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub split: String,
    #[arg(long)]
    pub index: usize,
    /// Output directory; defaults to `$ATTNGUIDE_OUT/attention`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[arg(long)]
    pub space_file: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    /// Output directory; defaults to `$ATTNGUIDE_OUT/grid`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Runs `body` between a started and a finished manifest in `dir`.
fn with_manifest<F>(dir: &Path, argv: &[String], seed: Option<u64>, body: F) -> Result<()>
where
    F: FnOnce(&mut RunManifest) -> Result<()>,
{
    let mut m = RunManifest::start(dir, argv.to_vec(), seed)?;
    let outcome = body(&mut m);
    m.finish(&outcome)?;
    outcome
}

fn set_lookup(spec: &mut LookupTaskSpec, key: &str, v: &str) -> Result<()> {
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("`{key}` needs an integer, got `{v}`")))?;
    match key {
        "bits" => spec.bits = n,
        "n_tables" => spec.n_tables = n,
        "heldout_inputs_per_composition" => spec.heldout_inputs_per_composition = n,
        "heldout_composition_count" => spec.heldout_composition_count = n,
        "reserved_tables" => spec.reserved_tables = n,
        _ => return Err(Error::config(format!("unknown lookup setting `{key}`"))),
    }
    Ok(())
}

fn set_sr(spec: &mut SymbolRewritingSpec, key: &str, v: &str) -> Result<()> {
    let nums: Vec<usize> = v
        .split([' ', ',', '-'])
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::config(format!("`{key}`: bad number `{s}`"))))
        .collect::<Result<_>>()?;
    let one = || match nums[..] {
        [n] => Ok(n),
        _ => Err(Error::config(format!("`{key}` needs one integer"))),
    };
    let range = || match nums[..] {
        [lo, hi] => Ok([lo, hi]),
        _ => Err(Error::config(format!("`{key}` needs `lo hi`"))),
    };
    match key {
        "n_input_symbols" => spec.n_input_symbols = one()?,
        "families_per_symbol" => spec.families_per_symbol = one()?,
        "variants_per_family" => spec.variants_per_family = one()?,
        "train_size" => spec.train_size = one()?,
        "test_size" => spec.test_size = one()?,
        "validation_size" => spec.validation_size = one()?,
        "train_lengths" => spec.train_lengths = range()?,
        "short_lengths" => spec.short_lengths = range()?,
        "long_lengths" => spec.long_lengths = range()?,
        "validation_lengths" => spec.validation_lengths = range()?,
        _ => return Err(Error::config(format!("unknown symbol-rewriting setting `{key}`"))),
    }
    Ok(())
}

/// Builds the dataset `gen-data` would write, without touching disk.
pub fn generate_dataset(args: &GenDataArgs) -> Result<DatasetBundle> {
    let mut rng = seeded_rng(args.seed);
    let kvs: Vec<(&str, &str)> = args
        .overrides
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .ok_or_else(|| Error::config(format!("override `{kv}` is not `key=value`")))
        })
        .collect::<Result<_>>()?;
    match args.task {
        TaskArg::Lookup => {
            if args.train_size.is_some() || args.paper_scale {
                return Err(Error::config("--train-size and --paper-scale apply to `sr` only"));
            }
            let mut spec = LookupTaskSpec::default();
            for (k, v) in kvs {
                set_lookup(&mut spec, k.trim(), v)?;
            }
            let mut bundle = build_lookup_splits(&spec, args.seed, &mut rng)?;
            let tables = bundle.lookup_tables()?;
            for &len in &args.longer {
                let exs = longer_compositions(&tables, len, args.longer_count, &mut rng)?;
                bundle.splits.push((format!("len{len}"), exs));
            }
            Ok(bundle)
        }
        TaskArg::Sr => {
            if !args.longer.is_empty() {
                return Err(Error::config("--longer applies to `lookup` only"));
            }
            let mut spec = if args.paper_scale {
                SymbolRewritingSpec::paper_scale()
            } else {
                SymbolRewritingSpec::default()
            };
            for (k, v) in kvs {
                set_sr(&mut spec, k.trim(), v)?;
            }
            if let Some(n) = args.train_size {
                spec.train_size = n;
            }
            let grammar = generate_grammar(&spec, &mut rng);
            build_sr_splits(&spec, &grammar, args.seed, &mut rng)
        }
    }
}

fn cmd_gen_data(args: &GenDataArgs, argv: &[String]) -> Result<()> {
    let task = match args.task {
        TaskArg::Lookup => "lookup",
        TaskArg::Sr => "sr",
    };
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| out_root().join(format!("data-{task}-s{}", args.seed)));
    let bundle = generate_dataset(args)?;
    with_manifest(&dir, argv, Some(args.seed), |m| {
        write_tsv(&bundle, &dir)?;
        write_file(&dir.join(STATS_FILE), stats_csv(&dataset_stats(&bundle)))?;
        m.lap("generate");
        m.set_dataset(&dir)?;
        for (name, exs) in &bundle.splits {
            println!("{name}\t{}", exs.len());
        }
        Ok(())
    })
}

fn load_data(dir: &Path) -> Result<DatasetBundle> {
    read_tsv(dir)
}

/// Run identifier derived from the config.
pub fn run_name(rc: &RunConfig) -> String {
    let m = &rc.model;
    format!(
        "e{}_h{}_{}_{}_{}_s{}",
        m.embedding_size, m.hidden_size, m.alignment, m.mechanism, m.guidance, rc.train.seed
    )
}

fn epochs_csv(stats: &[crate::training::EpochStats]) -> String {
    let mut s = String::from("epoch,task_loss,ag_loss\n");
    for e in stats {
        let ag = e.ag_loss.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{ag}\n", e.epoch, e.task_loss));
    }
    s
}

fn cmd_train(args: &TrainArgs, argv: &[String]) -> Result<()> {
    let rc = args.cfg.resolve()?;
    let bundle = load_data(&args.data)?;
    let name = run_name(&rc);
    let dir = args.out.clone().unwrap_or_else(|| out_root().join(&name));
    with_manifest(&dir, argv, Some(rc.train.seed), |m| {
        m.set_dataset(&args.data)?;
        let model = Model::new(
            rc.model.clone(),
            bundle.source_vocab.clone(),
            bundle.target_vocab.clone(),
            rc.train.seed,
        )?;
        let mut echo = rc.clone();
        echo.model = model.config.clone();
        m.set_config(
            echo.model
                .pairs()
                .into_iter()
                .chain(echo.train.pairs())
                .map(|(k, v)| (k.to_string(), v)),
        )?;
        write_file(&dir.join(CONFIG_FILE), echo.to_text())?;

        let quiet = args.quiet;
        let mut progress = |s: &crate::training::EpochStats, recs: &[MetricsRecord]| {
            if quiet {
                return;
            }
            let accs: Vec<String> = recs
                .iter()
                .map(|r| format!("{} {:.3}", r.split, r.seq_accuracy))
                .collect();
            eprintln!("epoch {} loss {:.4} | {}", s.epoch, s.task_loss, accs.join(", "));
        };
        let fr = fit(model, &bundle, &rc.train, Some(&mut progress))?;
        m.lap("fit");
        fr.best.save(&dir.join(CHECKPOINT_DIR))?;
        write_file(&dir.join(METRICS_FILE), metrics_csv(&name, &fr.history))?;
        write_file(&dir.join(EPOCHS_FILE), epochs_csv(&fr.epochs))?;
        println!("best epoch {} (selected on {})", fr.best_epoch, fr.selection_split);
        for r in fr.best_records() {
            println!("{}\tseq_acc {}", r.split, r.seq_accuracy);
        }
        Ok(())
    })
}

/// Checks that a checkpoint's vocabularies are the dataset's.
pub fn check_compatible(model: &Model, bundle: &DatasetBundle) -> Result<()> {
    for (side, mv, dv) in [
        ("source", &model.source_vocab, &bundle.source_vocab),
        ("target", &model.target_vocab, &bundle.target_vocab),
    ] {
        if mv.tokens() != dv.tokens() {
            return Err(Error::Compat(format!(
                "{side} vocabulary differs: checkpoint has {} tokens, dataset has {}",
                mv.len(),
                dv.len()
            )));
        }
    }
    Ok(())
}

/// Evaluates `model` on the named splits (all when empty). Epoch is 0.
pub fn evaluate_splits(
    model: &Model,
    bundle: &DatasetBundle,
    splits: &[String],
    batch_size: usize,
) -> Result<Vec<MetricsRecord>> {
    check_compatible(model, bundle)?;
    let names = if splits.is_empty() {
        bundle.split_names()
    } else {
        splits.to_vec()
    };
    let grammar = match bundle.task {
        TaskKind::SymbolRewriting => Some(bundle.grammar()?),
        TaskKind::Lookup => None,
    };
    names
        .iter()
        .map(|n| evaluate(model, n, bundle.require_split(n)?, 0, batch_size, grammar.as_ref()))
        .collect()
}

fn cmd_eval(args: &EvalArgs, _argv: &[String]) -> Result<()> {
    if args.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let model = Model::load(&args.checkpoint)?;
    let bundle = load_data(&args.data)?;
    let records = evaluate_splits(&model, &bundle, &args.split, args.batch_size)?;
    let f = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    println!("split\tseq_acc\ttoken_acc\tattn_acc\tgrammar_acc\ttask_loss\tag_loss");
    for r in &records {
        println!(
            "{}\t{:.4}\t{:.4}\t{}\t{}\t{:.4}\t{}",
            r.split,
            r.seq_accuracy,
            r.token_accuracy,
            f(r.attn_accuracy),
            f(r.grammar_accuracy),
            r.task_loss,
            f(r.ag_loss)
        );
    }
    if let Some(out) = &args.out {
        let id = args
            .checkpoint
            .file_name()
            .map_or_else(|| "checkpoint".to_string(), |n| n.to_string_lossy().into_owned());
        write_file(out, metrics_csv(&id, &records))?;
    }
    Ok(())
}

/// Attention heatmap of one example under greedy decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionPlot {
    pub source: Vec<String>,
    pub output: Vec<String>,
    pub correct: bool,
    /// Computed attention, one row per decoding step (EOS step included).
    pub rows: Vec<Vec<f64>>,
}

pub fn attention_plot(model: &Model, bundle: &DatasetBundle, split: &str, index: usize) -> Result<AttentionPlot> {
    check_compatible(model, bundle)?;
    let exs = bundle.require_split(split)?;
    let ex = exs.get(index).ok_or_else(|| {
        Error::InvalidInput(format!("index {index} out of range: split `{split}` has {} examples", exs.len()))
    })?;
    let enc = model.encode(&ex.source)?;
    let oracle = (model.config.guidance == Guidance::Oracle).then_some(&ex.ag_target[..]);
    let (output, steps) = model.greedy_decode(&enc, model.config.max_decode_length, oracle)?;
    Ok(AttentionPlot {
        source: ex.source.clone(),
        correct: output == ex.target,
        output,
        rows: steps.into_iter().map(|s| s.attention.weights).collect(),
    })
}

fn cmd_plot_attention(args: &PlotArgs, argv: &[String]) -> Result<()> {
    let model = Model::load(&args.checkpoint)?;
    let bundle = load_data(&args.data)?;
    let plot = attention_plot(&model, &bundle, &args.split, args.index)?;
    let dir = args.out.clone().unwrap_or_else(|| out_root().join("attention"));
    with_manifest(&dir, argv, None, |m| {
        m.set_dataset(&args.data)?;
        let tag = if plot.correct { "correct" } else { "incorrect" };
        let stem = format!("{}_{}_{tag}", args.split, args.index);
        write_file(&dir.join(format!("{stem}.csv")), attention_csv(&plot.rows))?;
        write_file(&dir.join(format!("{stem}.pgm")), attention_pgm(&plot.rows))?;
        println!("source\t{}", plot.source.join(" "));
        println!("output\t{}", plot.output.join(" "));
        println!("{}", dir.join(format!("{stem}.pgm")).display());
        Ok(())
    })
}

fn cmd_grid_search(args: &GridArgs, argv: &[String]) -> Result<()> {
    let text = fs::read_to_string(&args.space_file).map_err(|e| Error::io(&args.space_file, e))?;
    let space = GridSpace::parse(&text)?;
    let rc = args.cfg.resolve()?;
    if args.parallel == 0 {
        return Err(Error::config("--parallel must be at least 1"));
    }
    let bundle = load_data(&args.data)?;
    let dir = args.out.clone().unwrap_or_else(|| out_root().join("grid"));
    with_manifest(&dir, argv, Some(rc.train.seed), |m| {
        m.set_dataset(&args.data)?;
        m.set_config(
            rc.model
                .pairs()
                .into_iter()
                .chain(rc.train.pairs())
                .map(|(k, v)| (k.to_string(), v)),
        )?;
        let results = grid_search(&space, &bundle, &rc.model, &rc.train, args.parallel, Some(&dir))?;
        m.lap("search");
        let failed = results.iter().filter(|r| r.error.is_some()).count();
        write_file(&dir.join(GRID_FILE), grid_csv(&results, &bundle.split_names()))?;
        println!("{} runs, {failed} failed", results.len());
        Ok(())
    })
}

fn cmd_stats(args: &StatsArgs, _argv: &[String]) -> Result<()> {
    let bundle = load_data(&args.data)?;
    let csv = stats_csv(&dataset_stats(&bundle));
    match &args.out {
        Some(p) => write_file(p, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

pub fn run(cli: &Cli, argv: &[String]) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a, argv),
        Command::Train(a) => cmd_train(a, argv),
        Command::Eval(a) => cmd_eval(a, argv),
        Command::PlotAttention(a) => cmd_plot_attention(a, argv),
        Command::GridSearch(a) => cmd_grid_search(a, argv),
        Command::Stats(a) => cmd_stats(a, argv),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
