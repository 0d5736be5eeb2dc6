use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

/// Model and training settings of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Applies one `key = value` setting; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        if self.model.set(key, value)? || self.train.set(key, value)? {
            Ok(())
        } else {
            Err(Error::config(format!("unknown config key `{key}`")))
        }
    }

    /// Applies a config file: `key = value` lines, `#` comments.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("config line {}: expected `key = value`", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::config(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{kv}` is not `key=value`")))?;
        self.set(k, v)
    }

    /// Echo in config-file syntax; reading it back gives the same config.
    pub fn to_text(&self) -> String {
        self.model
            .pairs()
            .into_iter()
            .chain(self.train.pairs())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
