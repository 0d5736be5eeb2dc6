//! Symbol rewriting: each input symbol expands to one variant from each of
//! its three families, families in random order.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::{toks, DatasetBundle, Example, TaskKind, Vocab};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolRewritingSpec {
    pub n_input_symbols: usize,
    pub families_per_symbol: usize,
    pub variants_per_family: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub validation_size: usize,
    pub train_lengths: [usize; 2],
    pub short_lengths: [usize; 2],
    pub long_lengths: [usize; 2],
    pub validation_lengths: [usize; 2],
}

impl Default for SymbolRewritingSpec {
    fn default() -> Self {
        SymbolRewritingSpec {
            n_input_symbols: 40,
            families_per_symbol: 3,
            variants_per_family: 16,
            train_size: 10_000,
            test_size: 500,
            validation_size: 1_000,
            train_lengths: [5, 10],
            short_lengths: [1, 4],
            long_lengths: [11, 15],
            validation_lengths: [3, 12],
        }
    }
}

impl SymbolRewritingSpec {
    /// Training corpus size used in the original experiments.
    pub const PAPER_TRAIN_SIZE: usize = 100_000;

    pub fn paper_scale() -> Self {
        SymbolRewritingSpec {
            train_size: Self::PAPER_TRAIN_SIZE,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_input_symbols == 0 || self.families_per_symbol == 0 || self.variants_per_family == 0 {
            return Err(Error::config("grammar dimensions must be positive"));
        }
        for (name, [lo, hi]) in [
            ("train", self.train_lengths),
            ("short", self.short_lengths),
            ("long", self.long_lengths),
            ("validation", self.validation_lengths),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::config(format!("bad {name} length range [{lo},{hi}]")));
            }
        }
        // Train, standard and short splits sample without repetition.
        let distinct = self.train_lengths[1].max(self.short_lengths[1]);
        if distinct > self.n_input_symbols {
            return Err(Error::config(format!(
                "length {distinct} without repeats exceeds {} symbols",
                self.n_input_symbols
            )));
        }
        Ok(())
    }
}

/// `alphabets[s][f][v]` is variant `v` of family `f` of input symbol `s`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grammar {
    pub alphabets: Vec<Vec<Vec<String>>>,
}

impl Grammar {
    pub fn symbol(s: usize) -> String {
        format!("x{}", s + 1)
    }

    pub fn n_symbols(&self) -> usize {
        self.alphabets.len()
    }

    pub fn families(&self) -> usize {
        self.alphabets.first().map_or(0, Vec::len)
    }

    pub fn output_tokens(&self) -> Vec<String> {
        let mut all: Vec<String> = self.alphabets.iter().flatten().flatten().cloned().collect();
        all.sort();
        all
    }

    pub fn symbol_index(&self, token: &str) -> Option<usize> {
        token
            .strip_prefix('x')
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&n| n >= 1 && n <= self.n_symbols())
            .map(|n| n - 1)
    }

    /// `(symbol, family)` owning an output token.
    pub fn owner(&self) -> BTreeMap<&str, (usize, usize)> {
        let mut out = BTreeMap::new();
        for (s, fams) in self.alphabets.iter().enumerate() {
            for (f, vars) in fams.iter().enumerate() {
                for v in vars {
                    out.insert(v.as_str(), (s, f));
                }
            }
        }
        out
    }

    fn write_meta(&self, meta: &mut BTreeMap<String, String>) {
        for (s, fams) in self.alphabets.iter().enumerate() {
            let flat: Vec<&str> = fams.iter().flatten().map(String::as_str).collect();
            meta.insert(format!("grammar.{}", Self::symbol(s)), flat.join(" "));
        }
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            meta.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::data(format!("spec echo lacks `{k}`")))
        };
        let (n, f, v) = (
            get("n_input_symbols")?,
            get("families_per_symbol")?,
            get("variants_per_family")?,
        );
        let mut alphabets = Vec::with_capacity(n);
        for s in 0..n {
            let key = format!("grammar.{}", Self::symbol(s));
            let row = toks(
                meta.get(&key)
                    .ok_or_else(|| Error::data(format!("spec echo lacks `{key}`")))?,
            );
            if row.len() != f * v {
                return Err(Error::data(format!(
                    "`{key}` has {} tokens, expected {}",
                    row.len(),
                    f * v
                )));
            }
            alphabets.push(row.chunks(v).map(<[String]>::to_vec).collect());
        }
        Ok(Grammar { alphabets })
    }
}

/// Output tokens `y0000..` are dealt to (symbol, family, variant) slots in a
/// random order, so alphabets carry no visible structure.
pub fn generate_grammar<R: Rng>(spec: &SymbolRewritingSpec, rng: &mut R) -> Grammar {
    let (n, f, v) = (spec.n_input_symbols, spec.families_per_symbol, spec.variants_per_family);
    let total = n * f * v;
    let width = total.saturating_sub(1).to_string().len().max(4);
    let mut names: Vec<String> = (0..total).map(|i| format!("y{i:0width$}")).collect();
    names.shuffle(rng);
    let mut it = names.into_iter();
    let alphabets = (0..n)
        .map(|_| (0..f).map(|_| it.by_ref().take(v).collect()).collect())
        .collect();
    Grammar { alphabets }
}

/// Block `j / families` of the output comes from input position `j / families`.
pub fn sr_ag_targets(input_len: usize) -> Vec<usize> {
    (0..input_len * 3).map(|j| j / 3).collect()
}

pub fn sample_sr_example<R: Rng>(grammar: &Grammar, length: usize, allow_repeats: bool, rng: &mut R) -> Result<Example> {
    let n = grammar.n_symbols();
    if length == 0 {
        return Err(Error::config("symbol-rewriting inputs need length ≥ 1"));
    }
    if !allow_repeats && length > n {
        return Err(Error::config(format!(
            "cannot draw {length} distinct symbols from {n}"
        )));
    }
    let symbols: Vec<usize> = if allow_repeats {
        (0..length).map(|_| rng.random_range(0..n)).collect()
    } else {
        index::sample(rng, n, length).into_vec()
    };
    let f = grammar.families();
    let mut target = Vec::with_capacity(length * f);
    for &s in &symbols {
        let mut order: Vec<usize> = (0..f).collect();
        order.shuffle(rng);
        for fam in order {
            let vars = &grammar.alphabets[s][fam];
            target.push(vars[rng.random_range(0..vars.len())].clone());
        }
    }
    let source: Vec<String> = symbols.iter().map(|&s| Grammar::symbol(s)).collect();
    let ag = (0..target.len()).map(|j| j / f).collect();
    Ok(Example::new(source, target, ag))
}

/// True iff every output block is one token from each family of the
/// corresponding input symbol.
pub fn grammar_consistent(input: &[String], output: &[String], grammar: &Grammar) -> bool {
    let f = grammar.families();
    if f == 0 || output.len() != f * input.len() {
        return false;
    }
    let owner = grammar.owner();
    input.iter().zip(output.chunks(f)).all(|(sym, block)| {
        let Some(s) = grammar.symbol_index(sym) else {
            return false;
        };
        let mut seen = vec![false; f];
        block.iter().all(|tok| match owner.get(tok.as_str()) {
            Some(&(os, fam)) if os == s && !seen[fam] => {
                seen[fam] = true;
                true
            }
            _ => false,
        })
    })
}

fn sample_split<R: Rng>(
    grammar: &Grammar,
    size: usize,
    [lo, hi]: [usize; 2],
    allow_repeats: bool,
    rng: &mut R,
) -> Result<Vec<Example>> {
    (0..size)
        .map(|_| sample_sr_example(grammar, rng.random_range(lo..=hi), allow_repeats, rng))
        .collect()
}

/// Splits `train`, `validation`, `standard`, `repeat`, `short`, `long`.
pub fn build_sr_splits<R: Rng>(
    spec: &SymbolRewritingSpec,
    grammar: &Grammar,
    seed: u64,
    rng: &mut R,
) -> Result<DatasetBundle> {
    spec.validate()?;
    if grammar.n_symbols() != spec.n_input_symbols || grammar.families() != spec.families_per_symbol {
        return Err(Error::config("grammar does not match the symbol-rewriting spec"));
    }
    let splits = vec![
        ("train".to_string(), sample_split(grammar, spec.train_size, spec.train_lengths, false, rng)?),
        (
            "validation".to_string(),
            sample_split(grammar, spec.validation_size, spec.validation_lengths, true, rng)?,
        ),
        ("standard".to_string(), sample_split(grammar, spec.test_size, spec.train_lengths, false, rng)?),
        ("repeat".to_string(), sample_split(grammar, spec.test_size, spec.train_lengths, true, rng)?),
        ("short".to_string(), sample_split(grammar, spec.test_size, spec.short_lengths, false, rng)?),
        ("long".to_string(), sample_split(grammar, spec.test_size, spec.long_lengths, true, rng)?),
    ];

    let source_vocab = Vocab::new((0..grammar.n_symbols()).map(Grammar::symbol))?;
    let target_vocab = Vocab::with_specials(grammar.output_tokens())?;
    let mut meta = BTreeMap::new();
    meta.insert("task".into(), "sr".into());
    meta.insert("seed".into(), seed.to_string());
    meta.insert("n_input_symbols".into(), spec.n_input_symbols.to_string());
    meta.insert("families_per_symbol".into(), spec.families_per_symbol.to_string());
    meta.insert("variants_per_family".into(), spec.variants_per_family.to_string());
    meta.insert("train_size".into(), spec.train_size.to_string());
    meta.insert("paper_train_size".into(), SymbolRewritingSpec::PAPER_TRAIN_SIZE.to_string());
    meta.insert("test_size".into(), spec.test_size.to_string());
    meta.insert("validation_size".into(), spec.validation_size.to_string());
    for (name, [lo, hi]) in [
        ("train_lengths", spec.train_lengths),
        ("short_lengths", spec.short_lengths),
        ("long_lengths", spec.long_lengths),
        ("validation_lengths", spec.validation_lengths),
    ] {
        meta.insert(name.into(), format!("{lo} {hi}"));
    }
    grammar.write_meta(&mut meta);

    Ok(DatasetBundle {
        task: TaskKind::SymbolRewriting,
        splits,
        source_vocab,
        target_vocab,
        meta,
    })
}
