//! Task generators, split builders, attention-target annotators and dataset
//! file I/O.

mod io;
mod lookup;
mod stats;
mod symbol;

use std::collections::{BTreeMap, HashMap};

pub use io::{read_tsv, write_tsv, SPEC_FILE, VOCAB_FILE};
pub use lookup::{
    apply_composition, build_lookup_splits, generate_atomic_tables, longer_compositions, lookup_ag_targets,
    LookupTables, LookupTaskSpec,
};
pub use stats::{dataset_stats, stats_csv, SplitStats};
pub use symbol::{
    build_sr_splits, generate_grammar, grammar_consistent, sample_sr_example, sr_ag_targets, Grammar,
    SymbolRewritingSpec,
};

use crate::error::{Error, Result};

pub const SOS: &str = "<sos>";
pub const EOS: &str = "<eos>";

/// One task instance. `ag_target[t]` is the source position step `t` should
/// attend to; it is empty for corpora without attention targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub ag_target: Vec<usize>,
}

impl Example {
    pub fn new(source: Vec<String>, target: Vec<String>, ag_target: Vec<usize>) -> Self {
        Example {
            source,
            target,
            ag_target,
        }
    }

    pub fn has_ag(&self) -> bool {
        !self.ag_target.is_empty()
    }

    /// Checks the attention-target invariants.
    pub fn validate(&self) -> Result<()> {
        if self.source.is_empty() {
            return Err(Error::data("empty source sequence"));
        }
        if self.has_ag() {
            if self.ag_target.len() != self.target.len() {
                return Err(Error::data(format!(
                    "{} attention targets for {} target tokens",
                    self.ag_target.len(),
                    self.target.len()
                )));
            }
            if let Some(&bad) = self.ag_target.iter().find(|&&i| i >= self.source.len()) {
                return Err(Error::data(format!(
                    "attention target {bad} outside source of length {}",
                    self.source.len()
                )));
            }
        }
        Ok(())
    }
}

/// Ordered token list with reverse index.
#[derive(Clone, Debug, Default)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Vocab {
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab::default();
        for t in tokens {
            let t = t.into();
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::data(format!("invalid token {t:?}")));
            }
            if v.index.insert(t.clone(), v.tokens.len()).is_some() {
                return Err(Error::data(format!("duplicate token `{t}`")));
            }
            v.tokens.push(t);
        }
        Ok(v)
    }

    /// Target-side vocabulary: `tokens` followed by SOS and EOS.
    pub fn with_specials<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let all: Vec<String> = tokens
            .into_iter()
            .map(Into::into)
            .chain([SOS.to_string(), EOS.to_string()])
            .collect();
        Vocab::new(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Ids of `tokens`; an unknown token is a data error naming it.
    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                self.get(t)
                    .ok_or_else(|| Error::data(format!("token `{t}` is not in the vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    pub fn sos(&self) -> Option<usize> {
        self.get(SOS)
    }

    pub fn eos(&self) -> Option<usize> {
        self.get(EOS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Lookup,
    SymbolRewriting,
}

crate::attention::string_enum!(TaskKind, "task", TaskKind::Lookup => "lookup", TaskKind::SymbolRewriting => "sr");

/// Named splits plus vocabularies and the generating spec.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub task: TaskKind,
    pub splits: Vec<(String, Vec<Example>)>,
    pub source_vocab: Vocab,
    pub target_vocab: Vocab,
    /// Spec echo: generator settings and whatever is needed to regenerate
    /// targets (lookup tables, grammar).
    pub meta: BTreeMap<String, String>,
}

impl DatasetBundle {
    pub fn split(&self, name: &str) -> Option<&[Example]> {
        self.splits
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn require_split(&self, name: &str) -> Result<&[Example]> {
        self.split(name).ok_or_else(|| {
            Error::config(format!(
                "no split `{name}` (have: {})",
                self.split_names().join(", ")
            ))
        })
    }

    pub fn split_names(&self) -> Vec<String> {
        self.splits.iter().map(|(n, _)| n.clone()).collect()
    }

    /// True if every example of every split carries attention targets.
    pub fn has_ag(&self) -> bool {
        self.splits.iter().all(|(_, ex)| ex.iter().all(Example::has_ag))
    }

    /// Every example uses vocabulary tokens and satisfies its invariants.
    pub fn validate(&self) -> Result<()> {
        for (name, examples) in &self.splits {
            for (i, ex) in examples.iter().enumerate() {
                let ctx = |e: Error| Error::data(format!("split `{name}` example {i}: {e}"));
                ex.validate().map_err(ctx)?;
                self.source_vocab.encode(&ex.source).map_err(ctx)?;
                self.target_vocab.encode(&ex.target).map_err(ctx)?;
            }
        }
        Ok(())
    }

    /// Lookup tables stored in the spec echo.
    pub fn lookup_tables(&self) -> Result<LookupTables> {
        LookupTables::from_meta(&self.meta)
    }

    /// Rewriting grammar stored in the spec echo.
    pub fn grammar(&self) -> Result<Grammar> {
        Grammar::from_meta(&self.meta)
    }

    /// Default split used for model selection.
    pub fn selection_split(&self) -> &'static str {
        match self.task {
            TaskKind::Lookup => "heldout_inputs",
            TaskKind::SymbolRewriting => "validation",
        }
    }

    /// Recomputes the attention targets from `(source, target)` alone.
    pub fn regenerate_ag(&self, ex: &Example) -> Vec<usize> {
        match self.task {
            TaskKind::Lookup => lookup_ag_targets(ex),
            TaskKind::SymbolRewriting => sr_ag_targets(ex.source.len()),
        }
    }
}

pub(crate) fn toks(s: &str) -> Vec<String> {
    s.split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}
