//! Per-split distribution histograms: table compositions for lookup, input
//! lengths for symbol rewriting.

use std::collections::BTreeMap;

use super::{DatasetBundle, TaskKind};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitStats {
    pub split: String,
    /// Bucket label → example count. Buckets are composition strings
    /// (`t1 t2`) or zero-padded lengths.
    pub counts: BTreeMap<String, usize>,
}

impl SplitStats {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

pub fn dataset_stats(bundle: &DatasetBundle) -> Vec<SplitStats> {
    bundle
        .splits
        .iter()
        .map(|(name, examples)| {
            let mut counts = BTreeMap::new();
            for ex in examples {
                let key = match bundle.task {
                    TaskKind::Lookup => ex.source[1..].join(" "),
                    TaskKind::SymbolRewriting => format!("{:02}", ex.source.len()),
                };
                *counts.entry(key).or_insert(0) += 1;
            }
            SplitStats {
                split: name.clone(),
                counts,
            }
        })
        .collect()
}

/// CSV with header `key,count`; keys are `split/bucket`.
pub fn stats_csv(stats: &[SplitStats]) -> String {
    let mut out = String::from("key,count\n");
    for s in stats {
        for (bucket, n) in &s.counts {
            out.push_str(&format!("{}/{bucket},{n}\n", s.split));
        }
    }
    out
}
