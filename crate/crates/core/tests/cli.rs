use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_attnguide");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("ATTNGUIDE_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(p: &Path) -> usize {
    fs::read_to_string(p).unwrap().lines().count()
}

/// Every file except the manifest, by name.
fn contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != "manifest.txt")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn lookup_data(tmp: &TempDir) -> PathBuf {
    let d = tmp.path().join("lookup");
    ok(&["gen-data", "lookup", "--seed", "1", "--out", s(&d)]);
    d
}

const SMALL: [&str; 8] = [
    "--set",
    "embedding_size=4",
    "--set",
    "hidden_size=8",
    "--set",
    "eval_splits=heldout_inputs,heldout_tables",
    "--set",
    "batch_size=16",
];

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--quiet", "--epochs", "2"];
    args.extend(SMALL);
    args.extend(extra);
    ok(&args);
}

#[test]
fn gen_data_lookup_sizes_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let a = lookup_data(&tmp);
    for (split, n) in [
        ("train", 232),
        ("heldout_inputs", 56),
        ("heldout_compositions", 64),
        ("heldout_tables", 192),
        ("new_compositions", 32),
    ] {
        assert_eq!(lines(&a.join(format!("{split}.tsv"))), n, "{split}");
    }
    for f in ["vocab.tsv", "spec.txt", "stats.csv", "manifest.txt"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("status = ok"));
    assert!(manifest.contains("dataset.train.tsv = sha256:"));

    let b = tmp.path().join("again");
    ok(&["gen-data", "lookup", "--seed", "1", "--out", s(&b)]);
    assert_eq!(contents(&a), contents(&b));
    let c = tmp.path().join("other");
    ok(&["gen-data", "lookup", "--seed", "2", "--out", s(&c)]);
    assert_ne!(contents(&a), contents(&c));
}

#[test]
fn gen_data_sr_train_size_and_longer_splits() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("sr");
    ok(&[
        "gen-data", "sr", "--seed", "3", "--train-size", "100", "--set", "test_size=20", "--set",
        "validation_size=30", "--out", s(&d),
    ]);
    assert_eq!(lines(&d.join("train.tsv")), 100);
    assert_eq!(lines(&d.join("long.tsv")), 20);
    assert_eq!(lines(&d.join("validation.tsv")), 30);

    let l = tmp.path().join("longer");
    ok(&["gen-data", "lookup", "--longer", "3", "--longer-count", "10", "--out", s(&l)]);
    let text = fs::read_to_string(l.join("len3.tsv")).unwrap();
    assert_eq!(text.lines().count(), 10);
    assert!(text.lines().all(|x| x.ends_with("\t0 1 2 3")));
}

#[test]
fn usage_and_io_errors() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&["gen-data", "cubes"]), 2);
    assert_eq!(code(&["gen-data", "lookup", "--bogus"]), 2);
    assert_eq!(code(&["gen-data", "lookup", "--set", "bits=x", "--out", s(tmp.path())]), 2);
    assert_eq!(code(&["gen-data", "lookup", "--train-size", "5"]), 2);
    assert_eq!(code(&["stats", "--data", s(&tmp.path().join("missing"))]), 3);
    let file = tmp.path().join("plain");
    fs::write(&file, "x").unwrap();
    assert_eq!(code(&["gen-data", "lookup", "--out", s(&file.join("sub"))]), 3);
    assert_eq!(code(&["--help"]), 0);

    let data = lookup_data(&tmp);
    let cfg = tmp.path().join("typo.cfg");
    fs::write(&cfg, "hiden_size = 8\n").unwrap();
    let out = tmp.path().join("r");
    assert_eq!(
        code(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&out)]),
        2
    );
}

#[test]
fn stats_sections() {
    let tmp = TempDir::new().unwrap();
    let data = lookup_data(&tmp);
    let csv = ok(&["stats", "--data", s(&data)]);
    assert!(csv.starts_with("key,count\n"));
    let train: usize = csv
        .lines()
        .filter(|l| l.starts_with("train/"))
        .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(train, 232);

    let sr = tmp.path().join("sr");
    ok(&[
        "gen-data", "sr", "--train-size", "50", "--set", "test_size=0", "--set", "validation_size=10", "--out",
        s(&sr),
    ]);
    assert_eq!(lines(&sr.join("long.tsv")), 0);
    let csv = ok(&["stats", "--data", s(&sr)]);
    assert!(!csv.contains("long/"));
    assert!(csv.lines().filter(|l| l.starts_with("train/")).all(|l| {
        let len: usize = l[6..8].parse().unwrap();
        (5..=10).contains(&len)
    }));

    let sr2 = tmp.path().join("sr2");
    ok(&["gen-data", "sr", "--train-size", "10", "--set", "validation_size=10", "--set", "test_size=40", "--out", s(&sr2)]);
    let out = tmp.path().join("stats.csv");
    ok(&["stats", "--data", s(&sr2), "--out", s(&out)]);
    let csv = fs::read_to_string(out).unwrap();
    let long: Vec<usize> = csv
        .lines()
        .filter(|l| l.starts_with("long/"))
        .map(|l| l[5..7].parse().unwrap())
        .collect();
    assert!(!long.is_empty() && long.iter().all(|n| (11..=15).contains(n)));
}

#[test]
fn train_eval_plot_round_trip() {
    let tmp = TempDir::new().unwrap();
    let data = lookup_data(&tmp);
    let run_a = tmp.path().join("a");
    let run_b = tmp.path().join("b");
    train(&data, &run_a, &["--seed", "5"]);
    train(&data, &run_b, &["--seed", "5"]);
    for f in ["metrics.csv", "epochs.csv", "config.txt", "checkpoint/model.txt", "checkpoint/model.bin"] {
        assert_eq!(fs::read(run_a.join(f)).unwrap(), fs::read(run_b.join(f)).unwrap(), "{f}");
    }
    let metrics = fs::read_to_string(run_a.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("run_id,split,epoch,task_loss,ag_loss,seq_acc,token_acc,attn_acc\n"));
    // Two epochs times two splits.
    assert_eq!(metrics.lines().count(), 5);
    let manifest = fs::read_to_string(run_a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("status = ok"));
    assert!(manifest.contains("config.hidden_size = 8"));
    assert!(manifest.contains("seed = 5"));

    // The config echo reproduces the run.
    let run_c = tmp.path().join("c");
    ok(&["train", "--data", s(&data), "--config", s(&run_a.join("config.txt")), "--out", s(&run_c), "-q"]);
    assert_eq!(
        fs::read(run_a.join("metrics.csv")).unwrap(),
        fs::read(run_c.join("metrics.csv")).unwrap()
    );

    let ck = run_a.join("checkpoint");
    let table = ok(&["eval", "--checkpoint", s(&ck), "--data", s(&data)]);
    assert_eq!(table.lines().count(), 1 + 5);
    let out = tmp.path().join("eval.csv");
    ok(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--split", "train", "--split", "heldout_tables", "--out", s(&out)]);
    assert_eq!(lines(&out), 3);
    assert_eq!(code(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--split", "nope"]), 2);

    let plots = tmp.path().join("plots");
    ok(&[
        "plot-attention", "--checkpoint", s(&ck), "--data", s(&data), "--split", "heldout_inputs", "--index", "3",
        "--out", s(&plots),
    ]);
    let names: Vec<String> = fs::read_dir(&plots)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    let pgm = names.iter().find(|n| n.ends_with(".pgm")).expect("pgm written");
    assert!(pgm.starts_with("heldout_inputs_3_") && (pgm.ends_with("_correct.pgm") || pgm.ends_with("_incorrect.pgm")));
    let csv = fs::read_to_string(plots.join(pgm.replace(".pgm", ".csv"))).unwrap();
    let img = fs::read(plots.join(pgm)).unwrap();
    let rows = csv.lines().count();
    let header = format!("P5\n3 {rows}\n255\n");
    assert!(img.starts_with(header.as_bytes()));
    assert_eq!(img.len(), header.len() + 3 * rows);
    assert_eq!(
        code(&["plot-attention", "--checkpoint", s(&ck), "--data", s(&data), "--split", "train", "--index", "232"]),
        2
    );
}

#[test]
fn oracle_run_has_perfect_used_attention() {
    let tmp = TempDir::new().unwrap();
    let data = lookup_data(&tmp);
    let dir = tmp.path().join("oracle");
    train(&data, &dir, &["--guidance", "oracle"]);
    let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    for row in metrics.lines().skip(1) {
        assert_eq!(row.rsplit(',').next(), Some("1"), "{row}");
    }
}

#[test]
fn vocabulary_mismatch_and_numeric_failure_codes() {
    let tmp = TempDir::new().unwrap();
    let data = lookup_data(&tmp);
    let dir = tmp.path().join("run");
    train(&data, &dir, &[]);
    let sr = tmp.path().join("sr");
    ok(&["gen-data", "sr", "--train-size", "10", "--set", "test_size=5", "--set", "validation_size=5", "--out", s(&sr)]);
    let o = run(&["eval", "--checkpoint", s(&dir.join("checkpoint")), "--data", s(&sr)]);
    assert_eq!(o.status.code(), Some(5));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("checkpoint has 16 tokens, dataset has 40"), "{err}");

    let bad = tmp.path().join("bad");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&bad), "-q", "--set", "learning_rate=1e300"];
    args.extend(SMALL);
    assert_eq!(code(&args), 4);
    let manifest = fs::read_to_string(bad.join("manifest.txt")).unwrap();
    assert!(manifest.contains("status = failed: numeric failure"), "{manifest}");
}

#[test]
fn grid_search_smoke_and_parallel_agreement() {
    let tmp = TempDir::new().unwrap();
    let data = lookup_data(&tmp);
    let bad = tmp.path().join("bad.space");
    fs::write(&bad, "hidden_size = 8\nwidth = 3\n").unwrap();
    assert_eq!(code(&["grid-search", "--space-file", s(&bad), "--data", s(&data)]), 2);

    let space = tmp.path().join("grid.space");
    fs::write(&space, "# smoke\nembedding_size = 4\nhidden_size = 8\nguidance = none, learned\nruns = 1\n").unwrap();
    let common = ["--epochs", "1", "--set", "eval_splits=heldout_inputs"];
    let serial = tmp.path().join("serial");
    let par = tmp.path().join("par");
    for (out, p) in [(&serial, "1"), (&par, "2")] {
        let mut args = vec!["grid-search", "--space-file", s(&space), "--data", s(&data), "--out", s(out), "--parallel", p];
        args.extend(common);
        ok(&args);
    }
    let a = fs::read_to_string(serial.join("grid.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(par.join("grid.csv")).unwrap());
    assert_eq!(a.lines().count(), 3);
    assert!(a.lines().skip(1).all(|l| l.contains(",ok,")));
    assert!(serial.join("e4_h8_mlp_pre_rnn_learned_r0/metrics.csv").is_file());
}

#[test]
fn default_output_root_comes_from_the_environment() {
    let tmp = TempDir::new().unwrap();
    let o = Command::new(BIN)
        .args(["gen-data", "lookup", "--seed", "4"])
        .env("ATTNGUIDE_OUT", tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(tmp.path().join("data-lookup-s4/train.tsv").is_file());
}
