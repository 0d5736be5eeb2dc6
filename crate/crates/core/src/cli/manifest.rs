use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Provenance record of one output directory. Written when a command starts
/// and rewritten when it ends; the only file carrying wall-clock times.
#[derive(Clone, Debug)]
pub struct RunManifest {
    pub dir: PathBuf,
    pub command_line: Vec<String>,
    pub seed: Option<u64>,
    /// Config echo as `(key, value)`.
    pub config: Vec<(String, String)>,
    /// `(file name, sha256 hex)` of the input dataset.
    pub dataset: Vec<(String, String)>,
    pub timings: Vec<(String, f64)>,
    pub status: String,
    started_unix: u64,
    clock: Instant,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Checksums of the regular files in `dir`, sorted by name. The manifest of
/// the directory itself is skipped.
pub fn dir_checksums(dir: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        if !path.is_file() || name == MANIFEST_FILE {
            continue;
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        out.push((name, sha256_hex(&bytes)));
    }
    out.sort();
    Ok(out)
}

impl RunManifest {
    /// Creates `dir` and writes the manifest with status `running`.
    pub fn start(dir: &Path, command_line: Vec<String>, seed: Option<u64>) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = RunManifest {
            dir: dir.to_path_buf(),
            command_line,
            seed,
            config: Vec::new(),
            dataset: Vec::new(),
            timings: Vec::new(),
            status: "running".into(),
            started_unix: unix_now(),
            clock: Instant::now(),
        };
        m.write()?;
        Ok(m)
    }

    pub fn set_config(&mut self, pairs: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        self.config = pairs.into_iter().collect();
        self.write()
    }

    pub fn set_dataset(&mut self, data_dir: &Path) -> Result<()> {
        self.dataset = dir_checksums(data_dir)?;
        self.write()
    }

    /// Records seconds elapsed since start under `label`.
    pub fn lap(&mut self, label: &str) {
        self.timings.push((label.into(), self.clock.elapsed().as_secs_f64()));
    }

    /// Final write with the outcome of the command.
    pub fn finish(&mut self, outcome: &Result<()>) -> Result<()> {
        self.lap("total");
        self.status = match outcome {
            Ok(()) => "ok".into(),
            Err(e) => format!("failed: {e}").replace('\n', " "),
        };
        self.write()
    }

    pub fn render(&self) -> String {
        let mut s = String::from("attnguide-run 1\n");
        s.push_str(&format!("version = {}\n", env!("CARGO_PKG_VERSION")));
        s.push_str(&format!("command = {}\n", self.command_line.join(" ")));
        if let Some(seed) = self.seed {
            s.push_str(&format!("seed = {seed}\n"));
        }
        s.push_str(&format!("status = {}\n", self.status));
        s.push_str(&format!("started_unix = {}\n", self.started_unix));
        for (k, v) in &self.timings {
            s.push_str(&format!("seconds.{k} = {v:.3}\n"));
        }
        for (k, v) in &self.config {
            s.push_str(&format!("config.{k} = {v}\n"));
        }
        for (f, h) in &self.dataset {
            s.push_str(&format!("dataset.{f} = sha256:{h}\n"));
        }
        s
    }

    fn write(&self) -> Result<()> {
        let p = self.dir.join(MANIFEST_FILE);
        fs::write(&p, self.render()).map_err(|e| Error::io(&p, e))
    }
}
