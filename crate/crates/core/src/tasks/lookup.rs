//! Compositions of random bijections over fixed-width bit strings.
//!
//! A source is `[input, t_a, t_b, ...]`; tables apply left to right and the
//! target echoes the input followed by every intermediate result.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::{toks, DatasetBundle, Example, TaskKind, Vocab};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LookupTaskSpec {
    pub bits: usize,
    pub n_tables: usize,
    /// Inputs removed from every training composition.
    pub heldout_inputs_per_composition: usize,
    /// Compositions over the non-reserved tables removed from training.
    pub heldout_composition_count: usize,
    /// The last `reserved_tables` tables only appear atomically in training.
    pub reserved_tables: usize,
}

impl Default for LookupTaskSpec {
    fn default() -> Self {
        LookupTaskSpec {
            bits: 3,
            n_tables: 8,
            heldout_inputs_per_composition: 2,
            heldout_composition_count: 8,
            reserved_tables: 2,
        }
    }
}

impl LookupTaskSpec {
    pub fn n_inputs(&self) -> usize {
        1 << self.bits
    }

    fn validate(&self) -> Result<()> {
        let n_in = self.n_inputs();
        let open = self.n_tables.saturating_sub(self.reserved_tables);
        if self.bits == 0 || self.bits > 8 {
            return Err(Error::config(format!("bits must be in 1..=8, got {}", self.bits)));
        }
        if self.reserved_tables > self.n_tables || open == 0 {
            return Err(Error::config(format!(
                "{} reserved tables leave no composable tables out of {}",
                self.reserved_tables, self.n_tables
            )));
        }
        if self.heldout_inputs_per_composition >= n_in {
            return Err(Error::config(format!(
                "cannot hold out {} of {n_in} inputs per composition",
                self.heldout_inputs_per_composition
            )));
        }
        if self.heldout_composition_count > open * open {
            return Err(Error::config(format!(
                "cannot hold out {} of {} compositions",
                self.heldout_composition_count,
                open * open
            )));
        }
        Ok(())
    }
}

/// `tables[k][x]` is the image of input `x` under table `t{k+1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LookupTables {
    pub bits: usize,
    pub tables: Vec<Vec<usize>>,
}

impl LookupTables {
    pub fn name(k: usize) -> String {
        format!("t{}", k + 1)
    }

    pub fn bit_token(&self, x: usize) -> String {
        format!("{:0width$b}", x, width = self.bits)
    }

    pub fn parse_bits(&self, token: &str) -> Result<usize> {
        if token.len() != self.bits || !token.chars().all(|c| c == '0' || c == '1') {
            return Err(Error::data(format!("`{token}` is not a {}-bit input", self.bits)));
        }
        Ok(usize::from_str_radix(token, 2).unwrap())
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        name.strip_prefix('t')
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&n| n >= 1 && n <= self.tables.len())
            .map(|n| n - 1)
            .ok_or_else(|| Error::data(format!("unknown table `{name}`")))
    }

    fn write_meta(&self, meta: &mut BTreeMap<String, String>) {
        for (k, t) in self.tables.iter().enumerate() {
            let row: Vec<String> = t.iter().map(|&y| self.bit_token(y)).collect();
            meta.insert(format!("table.{}", Self::name(k)), row.join(" "));
        }
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let bits: usize = meta
            .get("bits")
            .and_then(|b| b.parse().ok())
            .ok_or_else(|| Error::data("spec echo lacks `bits`"))?;
        let n: usize = meta
            .get("n_tables")
            .and_then(|b| b.parse().ok())
            .ok_or_else(|| Error::data("spec echo lacks `n_tables`"))?;
        let mut out = LookupTables {
            bits,
            tables: Vec::new(),
        };
        for k in 0..n {
            let key = format!("table.{}", Self::name(k));
            let row = meta
                .get(&key)
                .ok_or_else(|| Error::data(format!("spec echo lacks `{key}`")))?;
            let t = toks(row)
                .iter()
                .map(|tok| out.parse_bits(tok))
                .collect::<Result<Vec<_>>>()?;
            out.tables.push(t);
        }
        Ok(out)
    }
}

/// `n_tables` pairwise-distinct uniformly random permutations of the
/// `2^bits` inputs. A duplicate draw is rejected and redrawn.
pub fn generate_atomic_tables<R: Rng>(spec: &LookupTaskSpec, rng: &mut R) -> LookupTables {
    let n_in = spec.n_inputs();
    let mut tables: Vec<Vec<usize>> = Vec::with_capacity(spec.n_tables);
    while tables.len() < spec.n_tables {
        let mut perm: Vec<usize> = (0..n_in).collect();
        perm.shuffle(rng);
        if !tables.contains(&perm) {
            tables.push(perm);
        }
    }
    LookupTables {
        bits: spec.bits,
        tables,
    }
}

/// Target tokens for `input` pushed through `table_names` in order:
/// `[input, t_1(input), t_2(t_1(input)), ...]`.
pub fn apply_composition(input: &str, table_names: &[String], tables: &LookupTables) -> Result<Vec<String>> {
    let mut x = tables.parse_bits(input)?;
    let mut out = vec![tables.bit_token(x)];
    for name in table_names {
        x = tables.tables[tables.index_of(name)?][x];
        out.push(tables.bit_token(x));
    }
    Ok(out)
}

/// Sequential reading of the source: step `t` attends position `t`.
pub fn lookup_ag_targets(ex: &Example) -> Vec<usize> {
    (0..ex.target.len()).collect()
}

fn make_example(tables: &LookupTables, input: usize, composition: &[usize]) -> Example {
    let names: Vec<String> = composition.iter().map(|&k| LookupTables::name(k)).collect();
    let input_tok = tables.bit_token(input);
    let target = apply_composition(&input_tok, &names, tables).expect("generated names are valid");
    let mut source = vec![input_tok];
    source.extend(names);
    let mut ex = Example::new(source, target, Vec::new());
    ex.ag_target = lookup_ag_targets(&ex);
    ex
}

fn vocabularies(tables: &LookupTables) -> Result<(Vocab, Vocab)> {
    let n_in = 1 << tables.bits;
    let inputs: Vec<String> = (0..n_in).map(|x| tables.bit_token(x)).collect();
    let names = (0..tables.tables.len()).map(LookupTables::name);
    let source = Vocab::new(inputs.iter().cloned().chain(names))?;
    let target = Vocab::with_specials(inputs)?;
    Ok((source, target))
}

/// Generates tables and the five splits: `train`, `heldout_inputs`,
/// `heldout_compositions`, `heldout_tables`, `new_compositions`.
///
/// Every table, reserved ones included, appears atomically in training with
/// every input. Compositions are ordered pairs.
pub fn build_lookup_splits<R: Rng>(spec: &LookupTaskSpec, seed: u64, rng: &mut R) -> Result<DatasetBundle> {
    spec.validate()?;
    let tables = generate_atomic_tables(spec, rng);
    let n_in = spec.n_inputs();
    let open = spec.n_tables - spec.reserved_tables;

    let open_pairs: Vec<[usize; 2]> = (0..open)
        .flat_map(|a| (0..open).map(move |b| [a, b]))
        .collect();
    let mut held_comp: Vec<usize> = index::sample(rng, open_pairs.len(), spec.heldout_composition_count).into_vec();
    held_comp.sort_unstable();

    let mut train = Vec::new();
    let mut heldout_inputs = Vec::new();
    let mut heldout_compositions = Vec::new();
    for k in 0..spec.n_tables {
        for x in 0..n_in {
            train.push(make_example(&tables, x, &[k]));
        }
    }
    for (pi, pair) in open_pairs.iter().enumerate() {
        if held_comp.binary_search(&pi).is_ok() {
            for x in 0..n_in {
                heldout_compositions.push(make_example(&tables, x, pair));
            }
            continue;
        }
        let mut held = index::sample(rng, n_in, spec.heldout_inputs_per_composition).into_vec();
        held.sort_unstable();
        for x in 0..n_in {
            let ex = make_example(&tables, x, pair);
            if held.contains(&x) {
                heldout_inputs.push(ex);
            } else {
                train.push(ex);
            }
        }
    }

    let mut heldout_tables = Vec::new();
    let mut new_compositions = Vec::new();
    for a in 0..spec.n_tables {
        for b in 0..spec.n_tables {
            let reserved = (a >= open) as usize + (b >= open) as usize;
            let target = match reserved {
                1 => &mut heldout_tables,
                2 => &mut new_compositions,
                _ => continue,
            };
            for x in 0..n_in {
                target.push(make_example(&tables, x, &[a, b]));
            }
        }
    }

    let (source_vocab, target_vocab) = vocabularies(&tables)?;
    let mut meta = BTreeMap::new();
    meta.insert("task".into(), "lookup".into());
    meta.insert("seed".into(), seed.to_string());
    meta.insert("bits".into(), spec.bits.to_string());
    meta.insert("n_tables".into(), spec.n_tables.to_string());
    meta.insert(
        "heldout_inputs_per_composition".into(),
        spec.heldout_inputs_per_composition.to_string(),
    );
    meta.insert(
        "heldout_composition_count".into(),
        spec.heldout_composition_count.to_string(),
    );
    meta.insert("reserved_tables".into(), spec.reserved_tables.to_string());
    tables.write_meta(&mut meta);

    Ok(DatasetBundle {
        task: TaskKind::Lookup,
        splits: vec![
            ("train".into(), train),
            ("heldout_inputs".into(), heldout_inputs),
            ("heldout_compositions".into(), heldout_compositions),
            ("heldout_tables".into(), heldout_tables),
            ("new_compositions".into(), new_compositions),
        ],
        source_vocab,
        target_vocab,
        meta,
    })
}

/// `count` random length-`length` compositions over all tables, with
/// uniformly random inputs.
pub fn longer_compositions<R: Rng>(
    tables: &LookupTables,
    length: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Example>> {
    if length < 3 {
        return Err(Error::config(format!(
            "longer compositions need length ≥ 3, got {length}"
        )));
    }
    let n_in = 1 << tables.bits;
    Ok((0..count)
        .map(|_| {
            let comp: Vec<usize> = (0..length).map(|_| rng.random_range(0..tables.tables.len())).collect();
            make_example(tables, rng.random_range(0..n_in), &comp)
        })
        .collect())
}
