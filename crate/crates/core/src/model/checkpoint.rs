//! Checkpoints: a text manifest plus a raw little-endian `f64` file.
//!
//! ```text
//! attnguide-checkpoint 1
//! config hidden_size = 512
//! ...
//! vocab source = 000 001 ... t8
//! vocab target = 000 ... <sos> <eos>
//! param encoder.embedding 10x16 0
//! ...
//! ```
//!
//! Parameter lines give name, shape and byte offset into the `.bin` file, in
//! store order.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{NumArray, ParamStore};
use crate::tasks::Vocab;

pub const CHECKPOINT_MANIFEST: &str = "model.txt";
pub const CHECKPOINT_BIN: &str = "model.bin";
const MAGIC: &str = "attnguide-checkpoint 1";

impl Model {
    /// Writes `model.txt` and `model.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = format!("{MAGIC}\n");
        for (k, v) in self.config.pairs() {
            manifest.push_str(&format!("config {k} = {v}\n"));
        }
        manifest.push_str(&format!("vocab source = {}\n", self.source_vocab.tokens().join(" ")));
        manifest.push_str(&format!("vocab target = {}\n", self.target_vocab.tokens().join(" ")));
        let mut bin = Vec::with_capacity(self.params.scalar_count() * 8);
        for p in self.params.iter() {
            let [r, c] = p.shape();
            manifest.push_str(&format!("param {} {r}x{c} {}\n", p.name, bin.len()));
            for &x in p.value.iter() {
                bin.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mp = dir.join(CHECKPOINT_MANIFEST);
        fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))?;
        let bp = dir.join(CHECKPOINT_BIN);
        fs::write(&bp, bin).map_err(|e| Error::io(&bp, e))
    }

    /// Reads a checkpoint written by [`Model::save`].
    pub fn load(dir: &Path) -> Result<Model> {
        let mp = dir.join(CHECKPOINT_MANIFEST);
        let bp = dir.join(CHECKPOINT_BIN);
        let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let bin = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
        let bad = |line: usize, msg: &str| Error::Parse {
            path: mp.clone(),
            line,
            msg: msg.to_string(),
        };

        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, l)| l) != Some(MAGIC) {
            return Err(bad(1, "not a checkpoint manifest"));
        }
        let mut config = ModelConfig::default();
        let (mut src, mut tgt) = (None, None);
        let mut store = ParamStore::new();
        let mut expected_offset = 0usize;
        for (i, line) in lines {
            let no = i + 1;
            let (kind, rest) = line.split_once(' ').ok_or_else(|| bad(no, "malformed line"))?;
            match kind {
                "config" => {
                    let (k, v) = rest.split_once(" = ").ok_or_else(|| bad(no, "expected `key = value`"))?;
                    if !config.set(k, v)? {
                        return Err(bad(no, &format!("unknown config key `{k}`")));
                    }
                }
                "vocab" => {
                    let (side, v) = rest.split_once(" = ").ok_or_else(|| bad(no, "expected `side = tokens`"))?;
                    let vocab = Vocab::new(v.split(' ').filter(|t| !t.is_empty()))?;
                    match side {
                        "source" => src = Some(vocab),
                        "target" => tgt = Some(vocab),
                        _ => return Err(bad(no, "vocabulary side must be source or target")),
                    }
                }
                "param" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    let [name, shape, offset] = f[..] else {
                        return Err(bad(no, "expected `param name RxC offset`"));
                    };
                    let (r, c) = shape.split_once('x').ok_or_else(|| bad(no, "bad shape"))?;
                    let (r, c): (usize, usize) = (
                        r.parse().map_err(|_| bad(no, "bad shape"))?,
                        c.parse().map_err(|_| bad(no, "bad shape"))?,
                    );
                    let offset: usize = offset.parse().map_err(|_| bad(no, "bad offset"))?;
                    if offset != expected_offset {
                        return Err(bad(no, "offsets are not contiguous"));
                    }
                    let end = offset + r * c * 8;
                    let bytes = bin.get(offset..end).ok_or_else(|| bad(no, "parameter data truncated"))?;
                    let data: Vec<f64> = bytes
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                        .collect();
                    let value = NumArray::from_shape_vec((r, c), data).expect("length checked");
                    store.add(name, value)?;
                    expected_offset = end;
                }
                _ => return Err(bad(no, &format!("unknown entry `{kind}`"))),
            }
        }
        if expected_offset != bin.len() {
            return Err(Error::data(format!(
                "{} has {} bytes, manifest covers {expected_offset}",
                bp.display(),
                bin.len()
            )));
        }
        let src = src.ok_or_else(|| bad(0, "missing source vocabulary"))?;
        let tgt = tgt.ok_or_else(|| bad(0, "missing target vocabulary"))?;
        Model::from_params(config, src, tgt, store)
    }
}
