//! Dataset directories: one `{split}.tsv` per split, a vocabulary file and a
//! spec echo.
//!
//! Example lines are `source<TAB>target[<TAB>ag]`, tokens separated by single
//! spaces, LF endings.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{toks, DatasetBundle, Example, TaskKind, Vocab};
use crate::error::{Error, Result};

pub const VOCAB_FILE: &str = "vocab.tsv";
pub const SPEC_FILE: &str = "spec.txt";

fn write(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn example_line(ex: &Example) -> String {
    let mut line = format!("{}\t{}", ex.source.join(" "), ex.target.join(" "));
    if ex.has_ag() {
        let ag: Vec<String> = ex.ag_target.iter().map(usize::to_string).collect();
        line.push('\t');
        line.push_str(&ag.join(" "));
    }
    line.push('\n');
    line
}

pub fn write_tsv(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, examples) in &bundle.splits {
        if name.is_empty() || name.contains(['/', '\\', ',', ' ']) {
            return Err(Error::config(format!("unusable split name {name:?}")));
        }
        let body: String = examples.iter().map(example_line).collect();
        write(&dir.join(format!("{name}.tsv")), &body)?;
    }

    let mut vocab = String::new();
    for (side, v) in [("source", &bundle.source_vocab), ("target", &bundle.target_vocab)] {
        for t in v.tokens() {
            vocab.push_str(&format!("{side}\t{t}\n"));
        }
    }
    write(&dir.join(VOCAB_FILE), &vocab)?;

    let mut meta = bundle.meta.clone();
    meta.insert("task".into(), bundle.task.to_string());
    meta.insert("splits".into(), bundle.split_names().join(","));
    let spec: String = meta.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    write(&dir.join(SPEC_FILE), &spec)
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read_split(path: &Path) -> Result<Vec<Example>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let no = i + 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&cols.len()) {
            return Err(parse_err(path, no, format!("expected 2 or 3 tab-separated columns, got {}", cols.len())));
        }
        let ag = match cols.get(2) {
            Some(c) => toks(c)
                .iter()
                .map(|t| t.parse::<usize>().map_err(|_| parse_err(path, no, format!("bad attention index `{t}`"))))
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        let ex = Example::new(toks(cols[0]), toks(cols[1]), ag);
        ex.validate().map_err(|e| parse_err(path, no, e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn read_tsv(dir: &Path) -> Result<DatasetBundle> {
    let spec_path = dir.join(SPEC_FILE);
    let mut meta = BTreeMap::new();
    for (i, line) in read(&spec_path)?.lines().enumerate() {
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| parse_err(&spec_path, i + 1, "expected `key = value`"))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let task: TaskKind = meta
        .get("task")
        .cloned()
        .ok_or_else(|| parse_err(&spec_path, 0, "missing `task`"))?
        .parse()
        .map_err(|e: Error| parse_err(&spec_path, 0, e.to_string()))?;
    let names = meta
        .remove("splits")
        .ok_or_else(|| parse_err(&spec_path, 0, "missing `splits`"))?;

    let vocab_path = dir.join(VOCAB_FILE);
    let (mut src, mut tgt) = (Vec::new(), Vec::new());
    for (i, line) in read(&vocab_path)?.lines().enumerate() {
        match line.split_once('\t') {
            Some(("source", t)) => src.push(t.to_string()),
            Some(("target", t)) => tgt.push(t.to_string()),
            _ => return Err(parse_err(&vocab_path, i + 1, "expected `source|target<TAB>token`")),
        }
    }
    let source_vocab = Vocab::new(src).map_err(|e| parse_err(&vocab_path, 0, e.to_string()))?;
    let target_vocab = Vocab::new(tgt).map_err(|e| parse_err(&vocab_path, 0, e.to_string()))?;

    let splits = names
        .split(',')
        .filter(|n| !n.is_empty())
        .map(|n| Ok((n.to_string(), read_split(&dir.join(format!("{n}.tsv")))?)))
        .collect::<Result<Vec<_>>>()?;

    let bundle = DatasetBundle {
        task,
        splits,
        source_vocab,
        target_vocab,
        meta,
    };
    bundle.validate()?;
    Ok(bundle)
}
