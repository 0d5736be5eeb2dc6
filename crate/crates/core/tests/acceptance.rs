//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Positional arguments pick criteria by number (`-- 1 2 9`). The symbol
//! rewriting experiment runs on a reduced corpus unless
//! `ATTNGUIDE_ACCEPTANCE=full`. A FAIL of criterion 2, 9 or 10, or any
//! analytic/numeric gradient gap above 1e-9, sets a failing exit status; other
//! FAIL lines do so only with `ATTNGUIDE_ACCEPTANCE_STRICT=1`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;

use attnguide::attention::{
    attend, context_vector, dot_score, full_focus_input, mlp_score, post_rnn_output, Alignment, AlignmentKind, MechanismKind,
    Normalizer,
};
use attnguide::model::{Guidance, Model, ModelConfig};
use attnguide::numerics::{
    grad_check_report, gru_cell, seeded_rng, uniform_init, GradReport, GruParams, InitRange, NumArray, ParamStore, Rng64, Tape, Var,
};
use attnguide::tasks::{
    build_lookup_splits, build_sr_splits, generate_grammar, longer_compositions, DatasetBundle, Example,
    LookupTaskSpec, SymbolRewritingSpec, Vocab,
};
use attnguide::training::{batch_loss, evaluate, fit, FitResult, MetricsRecord, TrainConfig};
use attnguide::Result;

const BIN: &str = env!("CARGO_BIN_EXE_attnguide");
const LOOKUP_SEEDS: [u64; 3] = [0, 1, 2];
const SR_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const HELDOUT: [&str; 3] = ["heldout_inputs", "heldout_compositions", "heldout_tables"];
const LOOKUP_SPLITS: [&str; 5] = [
    "train",
    "heldout_inputs",
    "heldout_compositions",
    "heldout_tables",
    "new_compositions",
];
const LEN3: &str = "len3";

const GRAD_ABS_LIMIT: f64 = 1e-9;

struct Report {
    lines: Vec<(usize, bool, bool)>,
    grad_abs: f64,
}

impl Report {
    fn line(&mut self, n: usize, pass: bool, detail: String) {
        println!("criterion {n:>2} {}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((n, pass, matches!(n, 2 | 9 | 10)));
    }

    fn info(&self, detail: String) {
        println!("             {detail}");
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(" "))
}

// ---------------------------------------------------------------------------
// 1. gradient fidelity

fn rand_matrix(rows: usize, cols: usize, rng: &mut Rng64) -> NumArray {
    uniform_init(rows, cols, InitRange::symmetric(1.0), rng).unwrap()
}

/// Scalar `Σ y ⊙ d` for a fixed random direction `d`.
fn project(t: &mut Tape, y: Var, rng: &mut Rng64) -> Result<Var> {
    let (rows, cols) = t.value(y).dim();
    let d = t.input(rand_matrix(rows, cols, rng));
    let prod = t.mul(y, d)?;
    let ones = t.input(Array2::ones((1, cols)));
    let per_row = t.matmul_t(prod, ones)?;
    t.pick_neg(per_row, &vec![0; rows], &vec![-1.0; rows])
}

fn op_checks(seed: u64) -> Vec<(&'static str, GradReport)> {
    let mut out = Vec::new();
    let mut check = |name: &'static str, store: &mut ParamStore, f: &dyn Fn(&ParamStore, &mut Tape) -> Result<Var>| {
        out.push((name, grad_check_report(store, 1e-5, f).unwrap()));
    };
    let dir_seed = 50 + seed;
    let proj = |t: &mut Tape, y: Var| project(t, y, &mut seeded_rng(dir_seed));

    let mut rng = seeded_rng(1000 + seed);
    let mut store = ParamStore::new();
    let a = store.add("a", rand_matrix(2, 3, &mut rng)).unwrap();
    let b = store.add("b", rand_matrix(2, 3, &mut rng)).unwrap();
    let w = store.add("w", rand_matrix(4, 3, &mut rng)).unwrap();
    let bias = store.add("bias", rand_matrix(1, 4, &mut rng)).unwrap();
    let table = store.add("table", rand_matrix(5, 3, &mut rng)).unwrap();
    let c3 = store.add("c3", rand_matrix(2, 3, &mut rng)).unwrap();
    let mask = ndarray::array![[true, true, false], [true, true, true]];

    check("affine", &mut store, &|s, t| {
        let (wv, bv, av) = (t.param(s, w), t.param(s, bias), t.param(s, a));
        let y = t.affine(wv, Some(bv), av)?;
        proj(t, y)
    });
    check("add/sub/mul/scale", &mut store, &|s, t| {
        let (av, bv) = (t.param(s, a), t.param(s, b));
        let m = t.mul(av, bv)?;
        let d = t.sub(m, bv)?;
        let e = t.add(d, av)?;
        let y = t.scale(e, 1.7);
        proj(t, y)
    });
    check("tanh/sigmoid/relu/concat", &mut store, &|s, t| {
        let (av, bv) = (t.param(s, a), t.param(s, b));
        let y1 = t.tanh(av);
        let y2 = t.sigmoid(av);
        let y3 = t.relu(bv);
        let c = t.concat(&[y1, y2, y3])?;
        proj(t, c)
    });
    check("gather/cols/rows/select", &mut store, &|s, t| {
        let (tab, av, bv) = (t.param(s, table), t.param(s, a), t.param(s, b));
        let emb = t.gather(tab, &[4, 0])?;
        let left = t.cols(emb, 1, 2)?;
        let top = t.rows(emb, 1, 1)?;
        let pick = t.select(&[true, false], av, bv)?;
        let l1 = proj(t, left)?;
        let l2 = proj(t, top)?;
        let l3 = proj(t, pick)?;
        t.sum(&[l1, l2, l3])
    });
    check("masked_softmax/log_softmax/nll", &mut store, &|s, t| {
        let (av, bv) = (t.param(s, a), t.param(s, b));
        let att = t.masked_softmax(av, &mask, 0.8)?;
        let lp = t.log_softmax(bv);
        let l1 = t.pick_neg(lp, &[0, 2], &[0.5, 0.5])?;
        let l2 = t.pick_neg_log(att, &[1, 2], &[0.3, 0.7])?;
        t.sum(&[l1, l2])
    });
    check("weighted_sum", &mut store, &|s, t| {
        let (av, bv, cv) = (t.param(s, a), t.param(s, b), t.param(s, c3));
        let att = t.masked_softmax(av, &mask, 1.0)?;
        let y = t.weighted_sum(att, &[bv, cv, av])?;
        proj(t, y)
    });

    let h = 4;
    let mut rng = seeded_rng(2000 + seed);
    let mut s2 = ParamStore::new();
    let gp = GruParams::create(&mut s2, "gru", 3, h, InitRange::symmetric(1.0), &mut rng).unwrap();
    let x = s2.add("x", rand_matrix(2, 3, &mut rng)).unwrap();
    let h0 = s2.add("h0", rand_matrix(2, h, &mut rng)).unwrap();
    let eo = s2.add("eo", rand_matrix(2, h, &mut rng)).unwrap();
    let eo2 = s2.add("eo2", rand_matrix(2, h, &mut rng)).unwrap();
    let eo3 = s2.add("eo3", rand_matrix(2, h, &mut rng)).unwrap();
    let w_c = s2.add("w_c", rand_matrix(h, 2 * h, &mut rng)).unwrap();
    let w_s = s2.add("w_s", rand_matrix(1, h, &mut rng)).unwrap();
    let de = s2.add("de", rand_matrix(2, 3, &mut rng)).unwrap();
    let w_f = s2.add("w_f", rand_matrix(h, 3 + h, &mut rng)).unwrap();
    let w_o = s2.add("w_o", rand_matrix(5, 2 * h, &mut rng)).unwrap();
    let b_o = s2.add("b_o", rand_matrix(1, 5, &mut rng)).unwrap();
    let noise = rand_matrix(2, 3, &mut rng);

    check("gru_cell", &mut s2, &|s, t| {
        let (xv, hv) = (t.param(s, x), t.param(s, h0));
        let y = gru_cell(t, s, &gp, xv, hv)?;
        proj(t, y)
    });
    check("mlp_score/dot_score", &mut s2, &|s, t| {
        let (e, q, wc, ws) = (t.param(s, eo), t.param(s, h0), t.param(s, w_c), t.param(s, w_s));
        let m = mlp_score(t, e, q, wc, ws)?;
        let d = dot_score(t, e, q)?;
        let l1 = proj(t, m)?;
        let l2 = proj(t, d)?;
        t.sum(&[l1, l2])
    });
    check("full_focus_input", &mut s2, &|s, t| {
        let (d, c, wf) = (t.param(s, de), t.param(s, eo), t.param(s, w_f));
        let y = full_focus_input(t, d, c, wf)?;
        proj(t, y)
    });
    check("post_rnn_output", &mut s2, &|s, t| {
        let (st, c, wo, bo) = (t.param(s, h0), t.param(s, eo), t.param(s, w_o), t.param(s, b_o));
        let lp = post_rnn_output(t, st, c, wo, Some(bo))?;
        t.pick_neg(lp, &[1, 4], &[0.5, 0.5])
    });
    let align = Alignment {
        kind: AlignmentKind::Mlp,
        hidden_size: h,
        w_c: Some(w_c),
        w_s: Some(w_s),
    };
    let norm = Normalizer::Gumbel {
        noise,
        temperature: 0.7,
    };
    check("attend (mlp, gumbel)/context", &mut s2, &|s, t| {
        let q = t.param(s, h0);
        let enc = [t.param(s, eo), t.param(s, eo2), t.param(s, eo3)];
        let keys = align.prepare(t, s, &enc)?;
        let att = attend(t, s, &align, &keys, q, &mask, &norm)?;
        let c = context_vector(t, att, &enc)?;
        let l1 = t.pick_neg_log(att, &[0, 2], &[0.5, 0.5])?;
        let l2 = proj(t, c)?;
        t.sum(&[l1, l2])
    });
    out
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn toy_examples() -> Vec<Example> {
    vec![
        Example::new(toks("a b c"), toks("x y z"), vec![0, 1, 2]),
        Example::new(toks("d a"), toks("y y"), vec![1, 0]),
        Example::new(toks("c"), toks("z"), vec![0]),
        Example::new(toks("b d d c"), toks("x z x y"), vec![3, 2, 1, 0]),
    ]
}

fn toy_model(mech: MechanismKind, align: AlignmentKind, guidance: Guidance, seed: u64) -> Model {
    let cfg = ModelConfig {
        embedding_size: 4,
        hidden_size: 4,
        alignment: align,
        mechanism: mech,
        guidance,
        loss_weight_ag: 0.7,
        init_scale: 1.0,
        ..Default::default()
    };
    let s = Vocab::new(toks("a b c d")).unwrap();
    let t = Vocab::with_specials(toks("x y z")).unwrap();
    Model::new(cfg, s, t, seed).unwrap()
}

fn combined_loss_report(m: &Model) -> GradReport {
    let exs = toy_examples();
    let refs: Vec<&Example> = exs.iter().collect();
    let batch = m.batch(&refs, true).unwrap();
    let mut store = m.params.clone();
    grad_check_report(&mut store, 1e-5, |s, tape| {
        let mut mm = m.clone();
        mm.params = s.clone();
        Ok(batch_loss(&mm, tape, &batch, None)?.0.total)
    })
    .unwrap()
}

fn worst_of(reports: impl IntoIterator<Item = GradReport>) -> GradReport {
    reports.into_iter().fold(GradReport::default(), |w, e| GradReport {
        max_relative: w.max_relative.max(e.max_relative),
        max_absolute: w.max_absolute.max(e.max_absolute),
    })
}

fn criterion_1(r: &mut Report) {
    let mut per_op: BTreeMap<&str, Vec<GradReport>> = BTreeMap::new();
    for seed in 0..10 {
        for (name, e) in op_checks(seed) {
            per_op.entry(name).or_default().push(e);
        }
    }
    let worst: BTreeMap<&str, GradReport> = per_op.into_iter().map(|(k, v)| (k, worst_of(v))).collect();
    let ops = worst_of(worst.values().copied());
    let model = |mech, guidance| {
        worst_of((0..10).map(|seed| combined_loss_report(&toy_model(mech, AlignmentKind::Mlp, guidance, seed))))
    };
    let guided = model(MechanismKind::FullFocus, Guidance::Learned);
    r.line(
        1,
        ops.max_relative < 1e-4 && guided.max_relative < 1e-4,
        format!(
            "max rel err over 10 seeds (< 1e-4): {} ops {:.2e}, full_focus/mlp/learned combined loss {:.2e}",
            worst.len(),
            ops.max_relative,
            guided.max_relative
        ),
    );
    for (name, e) in &worst {
        r.info(format!("op {name}: rel {:.2e}, abs {:.2e}", e.max_relative, e.max_absolute));
    }
    let mut all = vec![ops, guided];
    let mut variants = Vec::new();
    for mech in [MechanismKind::PreRnn, MechanismKind::PostRnn] {
        for guidance in [Guidance::Learned, Guidance::Oracle] {
            let e = model(mech, guidance);
            variants.push(format!("{mech}/{guidance} {:.1e}", e.max_relative));
            all.push(e);
        }
    }
    r.info(format!("combined loss, other variants, rel: {}", variants.join(", ")));
    r.grad_abs = worst_of(all).max_absolute;
    r.info(format!(
        "largest analytic-numeric gap anywhere {:.2e} (limit {GRAD_ABS_LIMIT:.0e})",
        r.grad_abs
    ));
}

// ---------------------------------------------------------------------------
// 2. dataset exactness

fn bits(tok: &str) -> usize {
    usize::from_str_radix(tok, 2).expect("bit token")
}

fn criterion_2(r: &mut Report) {
    let want = [
        ("train", 232),
        ("heldout_inputs", 56),
        ("heldout_compositions", 64),
        ("heldout_tables", 192),
        ("new_compositions", 32),
    ];
    let (mut sizes_ok, mut checked, mut matched, mut leaks) = (true, 0usize, 0usize, 0usize);
    let mut sizes = Vec::new();
    for seed in LOOKUP_SEEDS {
        let bundle = build_lookup_splits(&LookupTaskSpec::default(), seed, &mut seeded_rng(seed)).unwrap();
        let tables = bundle.lookup_tables().unwrap();
        for (name, n) in want {
            let got = bundle.split(name).map_or(0, <[Example]>::len);
            sizes_ok &= got == n;
            if seed == 0 {
                sizes.push(format!("{name}={got}"));
            }
        }
        let train: HashSet<&Vec<String>> = bundle.require_split("train").unwrap().iter().map(|e| &e.source).collect();
        for (name, exs) in &bundle.splits {
            for e in exs {
                checked += 1;
                let mut x = bits(&e.source[0]);
                let mut expect = vec![x];
                for t in &e.source[1..] {
                    let k: usize = t[1..].parse().expect("table name");
                    x = tables.tables[k - 1][x];
                    expect.push(x);
                }
                let got: Vec<usize> = e.target.iter().map(|t| bits(t)).collect();
                let ag_ok = e.ag_target == (0..e.target.len()).collect::<Vec<_>>();
                matched += usize::from(got == expect && ag_ok);
                leaks += usize::from(name != "train" && train.contains(&e.source));
            }
        }
    }
    r.line(
        2,
        sizes_ok && matched == checked && leaks == 0,
        format!(
            "{} over seeds 0-2; oracle agreement {matched}/{checked}; test sources seen in train {leaks}",
            sizes.join(" ")
        ),
    );
}

// ---------------------------------------------------------------------------
// lookup experiments (3-6, 8)

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Arm {
    Guided,
    Baseline,
    Oracle,
    Gumbel,
}

struct LookupRun {
    fit: FitResult,
    /// Selected model on every split plus `len3`.
    finals: BTreeMap<String, MetricsRecord>,
}

impl LookupRun {
    fn seq(&self, split: &str) -> f64 {
        self.finals[split].seq_accuracy
    }
}

fn lookup_bundle(seed: u64) -> DatasetBundle {
    let mut rng = seeded_rng(seed);
    let mut bundle = build_lookup_splits(&LookupTaskSpec::default(), seed, &mut rng).unwrap();
    let tables = bundle.lookup_tables().unwrap();
    let len3 = longer_compositions(&tables, 3, 100, &mut rng).unwrap();
    bundle.splits.push((LEN3.into(), len3));
    bundle
}

fn lookup_run(arm: Arm, seed: u64) -> LookupRun {
    let bundle = lookup_bundle(seed);
    let (e, guidance) = match arm {
        Arm::Guided => (16, Guidance::Learned),
        Arm::Baseline => (128, Guidance::None),
        Arm::Oracle => (16, Guidance::Oracle),
        Arm::Gumbel => (16, Guidance::Gumbel),
    };
    let cfg = ModelConfig {
        embedding_size: e,
        hidden_size: 512,
        alignment: AlignmentKind::Mlp,
        mechanism: MechanismKind::FullFocus,
        guidance,
        ..Default::default()
    };
    let model = Model::new(cfg, bundle.source_vocab.clone(), bundle.target_vocab.clone(), seed).unwrap();
    let per_epoch = matches!(arm, Arm::Guided | Arm::Baseline);
    let train = TrainConfig {
        seed,
        eval_every: if per_epoch { 1 } else { 5 },
        eval_splits: Some(if per_epoch {
            HELDOUT.iter().map(|s| s.to_string()).collect()
        } else {
            vec!["heldout_inputs".into()]
        }),
        ..Default::default()
    };
    let started = Instant::now();
    let fit = fit(model, &bundle, &train, None).unwrap();
    let mut finals = BTreeMap::new();
    for name in LOOKUP_SPLITS.iter().copied().chain([LEN3]) {
        let exs = bundle.require_split(name).unwrap();
        let rec = evaluate(&fit.best, name, exs, fit.best_epoch, 64, None).unwrap();
        finals.insert(name.to_string(), rec);
    }
    eprintln!(
        "  lookup {arm:?} seed {seed}: best epoch {}, {:.0}s",
        fit.best_epoch,
        started.elapsed().as_secs_f64()
    );
    LookupRun { fit, finals }
}

#[derive(Default)]
struct Lookup {
    runs: BTreeMap<(u8, u64), LookupRun>,
}

impl Lookup {
    fn get(&mut self, arm: Arm) -> Vec<&LookupRun> {
        let key = arm as u8;
        for seed in LOOKUP_SEEDS {
            self.runs.entry((key, seed)).or_insert_with(|| lookup_run(arm, seed));
        }
        LOOKUP_SEEDS.iter().map(|&s| &self.runs[&(key, s)]).collect()
    }
}

fn per_seed(runs: &[&LookupRun], f: impl Fn(&LookupRun) -> f64) -> Vec<f64> {
    runs.iter().map(|r| f(r)).collect()
}

fn criterion_3(r: &mut Report, lk: &mut Lookup) {
    let floors = [0.95, 0.90, 0.75];
    let guided = lk.get(Arm::Guided);
    let mut ok = true;
    let mut parts = Vec::new();
    for (split, floor) in HELDOUT.iter().zip(floors) {
        let v = per_seed(&guided, |x| x.seq(split));
        let m = median(v.clone());
        ok &= m >= floor;
        parts.push(format!("{split} {m:.3} (≥ {floor}) {}", fmt(&v)));
    }
    let guided_line = parts.join("; ");
    let base = lk.get(Arm::Baseline);
    let means = per_seed(&base, |x| HELDOUT.iter().map(|s| x.seq(s)).sum::<f64>() / 3.0);
    let trains = per_seed(&base, |x| x.seq("train"));
    let (bm, bt) = (median(means.clone()), median(trains.clone()));
    ok &= bm < 0.30 && bt >= 0.95;
    r.line(3, ok, format!("guided median seq acc: {guided_line}"));
    r.info(format!(
        "baseline heldout mean {bm:.3} (< 0.30) {}, train {bt:.3} (≥ 0.95) {}",
        fmt(&means),
        fmt(&trains)
    ));
}

fn criterion_4(r: &mut Report, lk: &mut Lookup) {
    let attn = |x: &LookupRun| x.finals["heldout_inputs"].attn_accuracy.unwrap_or(f64::NAN);
    let g = per_seed(&lk.get(Arm::Guided), attn);
    let b = per_seed(&lk.get(Arm::Baseline), attn);
    let (gm, bm) = (median(g.clone()), median(b.clone()));
    r.line(
        4,
        gm >= 0.95 && bm < gm,
        format!("heldout_inputs attn acc: guided {gm:.3} (≥ 0.95) {}, baseline {bm:.3} {}", fmt(&g), fmt(&b)),
    );
}

fn criterion_5(r: &mut Report, lk: &mut Lookup) {
    let oracle = lk.get(Arm::Oracle);
    let mut ok = true;
    let mut parts = Vec::new();
    for split in LOOKUP_SPLITS.iter().copied().chain([LEN3]) {
        let m = median(per_seed(&oracle, |x| x.seq(split)));
        ok &= m >= 0.98;
        parts.push(format!("{split} {m:.3}"));
    }
    let o3 = median(per_seed(&oracle, |x| x.seq(LEN3)));
    let g3v = per_seed(&lk.get(Arm::Guided), |x| x.seq(LEN3));
    let g3 = median(g3v.clone());
    ok &= g3 < o3;
    r.line(5, ok, format!("oracle median seq acc (≥ 0.98): {}", parts.join(", ")));
    r.info(format!("learned guidance on len3 {g3:.3} {} (< oracle {o3:.3})", fmt(&g3v)));
}

/// Final-epoch heldout loss minus the loss at the epoch where training loss
/// first fell below 0.05; the largest over the heldout splits.
fn loss_rise(run: &LookupRun) -> f64 {
    let Some(at) = run.fit.epochs.iter().find(|e| e.task_loss < 0.05).map(|e| e.epoch) else {
        return f64::NAN;
    };
    let last = run.fit.epochs.last().unwrap().epoch;
    HELDOUT
        .iter()
        .map(|s| run.fit.record(s, last).unwrap().task_loss - run.fit.record(s, at).unwrap().task_loss)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn criterion_6(r: &mut Report, lk: &mut Lookup) {
    let g = per_seed(&lk.get(Arm::Guided), loss_rise);
    let b = per_seed(&lk.get(Arm::Baseline), loss_rise);
    let (gm, bm) = (median(g.clone()), median(b.clone()));
    r.line(
        6,
        gm <= 0.01 && bm > 0.01,
        format!("heldout loss rise after train loss < 0.05: guided {gm:.3} (≤ 0.01) {}, baseline {bm:.3} (> 0.01) {}", fmt(&g), fmt(&b)),
    );
}

fn criterion_8(r: &mut Report, lk: &mut Lookup) {
    let g = per_seed(&lk.get(Arm::Guided), |x| x.seq("heldout_tables"));
    let s = per_seed(&lk.get(Arm::Gumbel), |x| x.seq("heldout_tables"));
    let (gm, sm) = (median(g.clone()), median(s.clone()));
    r.line(
        8,
        sm <= gm - 0.20,
        format!("heldout_tables seq acc: gumbel {sm:.3} {} vs guided {gm:.3} {} (gap ≥ 0.20)", fmt(&s), fmt(&g)),
    );
}

// ---------------------------------------------------------------------------
// 7. symbol rewriting

const SR_TESTS: [&str; 4] = ["standard", "repeat", "short", "long"];

struct SrScale {
    train: usize,
    tests: usize,
    validation: usize,
    epochs: usize,
}

fn sr_scale() -> SrScale {
    if std::env::var("ATTNGUIDE_ACCEPTANCE").as_deref() == Ok("full") {
        SrScale {
            train: 10_000,
            tests: 500,
            validation: 1_000,
            epochs: 30,
        }
    } else {
        SrScale {
            train: 1_000,
            tests: 100,
            validation: 100,
            epochs: 10,
        }
    }
}

fn sr_run(guided: bool, seed: u64, scale: &SrScale) -> BTreeMap<String, MetricsRecord> {
    let spec = SymbolRewritingSpec {
        train_size: scale.train,
        test_size: scale.tests,
        validation_size: scale.validation,
        ..Default::default()
    };
    let mut rng = seeded_rng(seed);
    let grammar = generate_grammar(&spec, &mut rng);
    let bundle = build_sr_splits(&spec, &grammar, seed, &mut rng).unwrap();
    let (e, h, guidance) = if guided { (32, 256, Guidance::Learned) } else { (64, 64, Guidance::None) };
    let cfg = ModelConfig {
        embedding_size: e,
        hidden_size: h,
        alignment: AlignmentKind::Mlp,
        mechanism: MechanismKind::PreRnn,
        guidance,
        ..Default::default()
    };
    let model = Model::new(cfg, bundle.source_vocab.clone(), bundle.target_vocab.clone(), seed).unwrap();
    let train = TrainConfig {
        seed,
        epochs: scale.epochs,
        eval_splits: Some(vec!["validation".into()]),
        ..Default::default()
    };
    let started = Instant::now();
    let fit = fit(model, &bundle, &train, None).unwrap();
    let g = bundle.grammar().unwrap();
    let out = SR_TESTS
        .iter()
        .map(|name| {
            let exs = bundle.require_split(name).unwrap();
            let rec = evaluate(&fit.best, name, exs, fit.best_epoch, 64, Some(&g)).unwrap();
            (name.to_string(), rec)
        })
        .collect();
    eprintln!(
        "  sr {} seed {seed}: best epoch {}, {:.0}s",
        if guided { "guided" } else { "baseline" },
        fit.best_epoch,
        started.elapsed().as_secs_f64()
    );
    out
}

fn criterion_7(r: &mut Report) {
    let scale = sr_scale();
    let guided: Vec<_> = SR_SEEDS.iter().map(|&s| sr_run(true, s, &scale)).collect();
    let base: Vec<_> = SR_SEEDS.iter().map(|&s| sr_run(false, s, &scale)).collect();
    let med = |runs: &[BTreeMap<String, MetricsRecord>], split: &str, f: fn(&MetricsRecord) -> f64| {
        median(runs.iter().map(|m| f(&m[split])).collect())
    };
    let seq: fn(&MetricsRecord) -> f64 = |m| m.seq_accuracy;
    let gram: fn(&MetricsRecord) -> f64 = |m| m.grammar_accuracy.unwrap_or(f64::NAN);
    let mut ok = true;
    let mut parts = Vec::new();
    for split in SR_TESTS {
        let (g, b) = (med(&guided, split, seq), med(&base, split, seq));
        ok &= if split == "standard" { (g - b).abs() <= 0.20 } else { g - b >= 0.10 };
        parts.push(format!("{split} {g:.3}/{b:.3}"));
    }
    r.line(
        7,
        ok,
        format!(
            "train {} × {} epochs, median seq acc guided/baseline: {}",
            scale.train,
            scale.epochs,
            parts.join(", ")
        ),
    );
    let gparts: Vec<String> = SR_TESTS
        .iter()
        .map(|s| format!("{s} {:.3}/{:.3}", med(&guided, s, gram), med(&base, s, gram)))
        .collect();
    r.info(format!("median grammar acc guided/baseline: {}", gparts.join(", ")));
}

// ---------------------------------------------------------------------------
// 9. determinism, 10. checkpoint round-trip

fn cli(args: &[&str]) {
    let out = Command::new(BIN).args(args).env_remove("ATTNGUIDE_OUT").output().unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Every file under `dir` except run manifests, which record wall time.
fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "manifest.txt") {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn invoke_all(root: &Path) {
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    let (data, sr) = (root.join("data"), root.join("sr"));
    let small = ["--set", "embedding_size=4", "--set", "hidden_size=8"];
    cli(&["gen-data", "lookup", "--seed", "3", "--out", &s(&data), "--longer", "3"]);
    cli(&["gen-data", "sr", "--seed", "3", "--out", &s(&sr), "--train-size", "40"]);
    cli(&["stats", "--data", &s(&data), "--out", &s(&root.join("stats.csv"))]);
    for (name, guidance) in [("learned", "learned"), ("oracle", "oracle"), ("gumbel", "gumbel")] {
        let (data_s, out_s) = (s(&data), s(&root.join(name)));
        let mut args = vec!["train", "--data", &data_s, "--out", &out_s, "-q", "--epochs", "2", "--guidance", guidance];
        args.extend(small);
        cli(&args);
    }
    let ck = root.join("learned").join("checkpoint");
    cli(&["eval", "--checkpoint", &s(&ck), "--data", &s(&data), "--out", &s(&root.join("eval.csv"))]);
    cli(&[
        "plot-attention",
        "--checkpoint",
        &s(&ck),
        "--data",
        &s(&data),
        "--split",
        "len3",
        "--index",
        "1",
        "--out",
        &s(&root.join("plots")),
    ]);
    let sr_out = root.join("sr_run");
    let (sr_s, sr_out_s) = (s(&sr), s(&sr_out));
    let mut args = vec!["train", "--data", &sr_s, "--out", &sr_out_s, "-q", "--epochs", "1"];
    args.extend(small);
    cli(&args);
    let space = root.join("grid.space");
    fs::write(&space, "embedding_size = 4\nhidden_size = 8\nguidance = none, learned\nruns = 1\n").unwrap();
    cli(&[
        "grid-search",
        "--space-file",
        &s(&space),
        "--data",
        &s(&data),
        "--epochs",
        "1",
        "--parallel",
        "2",
        "--out",
        &s(&root.join("grid")),
    ]);
}

fn criterion_9(r: &mut Report) {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    invoke_all(&a);
    invoke_all(&b);
    let (ta, tb) = (tree(&a), tree(&b));
    let differing: Vec<&String> = ta.keys().filter(|k| tb.get(*k) != ta.get(*k)).collect();
    let has = |suffix: &str| ta.keys().filter(|k| k.ends_with(suffix)).count();
    r.line(
        9,
        differing.is_empty() && ta.len() == tb.len(),
        format!(
            "{} files ({} metrics CSVs, {} checkpoint files) byte-identical across two invocations; differing {differing:?}",
            ta.len(),
            has("metrics.csv") + has("eval.csv") + has("grid.csv"),
            ta.keys().filter(|k| k.contains("checkpoint")).count()
        ),
    );
}

fn same(a: &MetricsRecord, b: &MetricsRecord) -> bool {
    let bits = |x: Option<f64>| x.map(f64::to_bits);
    a.split == b.split
        && a.task_loss.to_bits() == b.task_loss.to_bits()
        && bits(a.ag_loss) == bits(b.ag_loss)
        && a.seq_accuracy.to_bits() == b.seq_accuracy.to_bits()
        && a.token_accuracy.to_bits() == b.token_accuracy.to_bits()
        && bits(a.attn_accuracy) == bits(b.attn_accuracy)
        && bits(a.grammar_accuracy) == bits(b.grammar_accuracy)
}

fn criterion_10(r: &mut Report) {
    let tmp = tempfile::tempdir().unwrap();
    let mut total = 0;
    let mut equal = 0;
    let lookup = lookup_bundle(4);
    let spec = SymbolRewritingSpec {
        train_size: 60,
        test_size: 10,
        validation_size: 10,
        ..Default::default()
    };
    let mut rng = seeded_rng(4);
    let grammar = generate_grammar(&spec, &mut rng);
    let sr = build_sr_splits(&spec, &grammar, 4, &mut rng).unwrap();
    let settings = [
        (&lookup, MechanismKind::FullFocus, Guidance::Learned),
        (&lookup, MechanismKind::PostRnn, Guidance::Oracle),
        (&lookup, MechanismKind::PreRnn, Guidance::Gumbel),
        (&sr, MechanismKind::PreRnn, Guidance::Learned),
    ];
    for (i, (bundle, mech, guidance)) in settings.into_iter().enumerate() {
        let cfg = ModelConfig {
            embedding_size: 6,
            hidden_size: 10,
            mechanism: mech,
            guidance,
            ..Default::default()
        };
        let model = Model::new(cfg, bundle.source_vocab.clone(), bundle.target_vocab.clone(), 9).unwrap();
        let train = TrainConfig {
            epochs: 2,
            seed: 9,
            eval_splits: Some(vec![bundle.selection_split().into()]),
            ..Default::default()
        };
        let trained = fit(model, bundle, &train, None).unwrap().best;
        let dir = tmp.path().join(format!("m{i}"));
        trained.save(&dir).unwrap();
        let loaded = Model::load(&dir).unwrap();
        let grammar = bundle.grammar().ok();
        for (name, exs) in &bundle.splits {
            let a = evaluate(&trained, name, exs, 0, 32, grammar.as_ref()).unwrap();
            let b = evaluate(&loaded, name, exs, 0, 32, grammar.as_ref()).unwrap();
            total += 1;
            equal += usize::from(same(&a, &b));
        }
    }
    r.line(
        10,
        equal == total,
        format!("save → load → evaluate bit-identical on {equal}/{total} (model, split) pairs"),
    );
}

fn main() {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| picked.is_empty() || picked.contains(&n);
    let strict = std::env::var("ATTNGUIDE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut r = Report {
        lines: Vec::new(),
        grad_abs: 0.0,
    };
    let mut lk = Lookup::default();
    if want(1) {
        criterion_1(&mut r);
    }
    if want(2) {
        criterion_2(&mut r);
    }
    if want(9) {
        criterion_9(&mut r);
    }
    if want(10) {
        criterion_10(&mut r);
    }
    type Experiment = fn(&mut Report, &mut Lookup);
    let experiments: [(usize, Experiment); 5] = [
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (8, criterion_8),
    ];
    for (n, f) in experiments {
        if want(n) {
            f(&mut r, &mut lk);
        }
    }
    if want(7) {
        criterion_7(&mut r);
    }
    let failed: Vec<usize> = r.lines.iter().filter(|l| !l.1).map(|l| l.0).collect();
    let fatal = r.grad_abs > GRAD_ABS_LIMIT || r.lines.iter().any(|&(_, pass, hard)| !pass && (hard || strict));
    println!(
        "acceptance: {} of {} criteria pass{}",
        r.lines.len() - failed.len(),
        r.lines.len(),
        if failed.is_empty() { String::new() } else { format!("; failing {failed:?}") }
    );
    if fatal {
        std::process::exit(1);
    }
}
