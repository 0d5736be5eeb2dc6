use crate::attention::{string_enum, AlignmentKind, MechanismKind};
use crate::error::{Error, Result};
use crate::numerics::GruParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    Gru,
}

string_enum!(CellKind, "cell", CellKind::Gru => "gru");

/// How attention is trained or replaced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Guidance {
    /// Unsupervised attention.
    None,
    /// Attention supervised by the AG loss.
    Learned,
    /// The target one-hot row replaces the computed row as the context weights.
    Oracle,
    /// Unsupervised attention normalized by a Gumbel softmax during training.
    Gumbel,
}

string_enum!(
    Guidance,
    "guidance",
    Guidance::None => "none",
    Guidance::Learned => "learned",
    Guidance::Oracle => "oracle",
    Guidance::Gumbel => "gumbel",
);

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub cell: CellKind,
    pub embedding_size: usize,
    pub hidden_size: usize,
    pub alignment: AlignmentKind,
    pub mechanism: MechanismKind,
    pub guidance: Guidance,
    pub loss_weight_task: f64,
    /// Only applied under learned guidance; see [`ModelConfig::ag_weight`].
    pub loss_weight_ag: f64,
    pub gumbel_temperature: f64,
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub max_decode_length: usize,
    /// Parameters are drawn from `Uniform(−init_scale, init_scale)`.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            cell: CellKind::Gru,
            embedding_size: 16,
            hidden_size: 512,
            alignment: AlignmentKind::Mlp,
            mechanism: MechanismKind::FullFocus,
            guidance: Guidance::Learned,
            loss_weight_task: 1.0,
            loss_weight_ag: 1.0,
            gumbel_temperature: 1.0,
            source_vocab_size: 0,
            target_vocab_size: 0,
            max_decode_length: 64,
            init_scale: 0.08,
        }
    }
}

pub(crate) fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("bad value `{value}` for `{key}`")))
}

impl ModelConfig {
    pub const KEYS: [&'static str; 13] = [
        "cell",
        "embedding_size",
        "hidden_size",
        "alignment",
        "mechanism",
        "guidance",
        "loss_weight_task",
        "loss_weight_ag",
        "gumbel_temperature",
        "source_vocab_size",
        "target_vocab_size",
        "max_decode_length",
        "init_scale",
    ];

    /// Weight of the AG term actually used in training.
    pub fn ag_weight(&self) -> f64 {
        match self.guidance {
            Guidance::Learned => self.loss_weight_ag,
            _ => 0.0,
        }
    }

    /// Whether training or decoding consumes attention targets.
    pub fn needs_ag_targets(&self) -> bool {
        self.guidance == Guidance::Oracle || self.ag_weight() > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_size == 0 || self.hidden_size == 0 {
            return Err(Error::config("embedding and hidden sizes must be positive"));
        }
        if self.max_decode_length == 0 {
            return Err(Error::config("max_decode_length must be positive"));
        }
        if self.guidance == Guidance::Gumbel && !(self.gumbel_temperature > 0.0) {
            return Err(Error::config(format!(
                "gumbel guidance needs a positive temperature, got {}",
                self.gumbel_temperature
            )));
        }
        for (k, v) in [
            ("loss_weight_task", self.loss_weight_task),
            ("loss_weight_ag", self.loss_weight_ag),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("`{k}` must be finite and ≥ 0, got {v}")));
            }
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config(format!("init_scale must be positive, got {}", self.init_scale)));
        }
        Ok(())
    }

    /// Sets one field from its textual form. Returns `false` for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        match key {
            "cell" => self.cell = v.parse()?,
            "embedding_size" => self.embedding_size = parse_num(key, v)?,
            "hidden_size" => self.hidden_size = parse_num(key, v)?,
            "alignment" => self.alignment = v.parse()?,
            "mechanism" => self.mechanism = v.parse()?,
            "guidance" => self.guidance = v.parse()?,
            "loss_weight_task" => self.loss_weight_task = parse_num(key, v)?,
            "loss_weight_ag" => self.loss_weight_ag = parse_num(key, v)?,
            "gumbel_temperature" => self.gumbel_temperature = parse_num(key, v)?,
            "source_vocab_size" => self.source_vocab_size = parse_num(key, v)?,
            "target_vocab_size" => self.target_vocab_size = parse_num(key, v)?,
            "max_decode_length" => self.max_decode_length = parse_num(key, v)?,
            "init_scale" => self.init_scale = parse_num(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// `(key, value)` pairs in [`ModelConfig::KEYS`] order; `set` inverts it.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.cell.to_string(),
            self.embedding_size.to_string(),
            self.hidden_size.to_string(),
            self.alignment.to_string(),
            self.mechanism.to_string(),
            self.guidance.to_string(),
            self.loss_weight_task.to_string(),
            self.loss_weight_ag.to_string(),
            self.gumbel_temperature.to_string(),
            self.source_vocab_size.to_string(),
            self.target_vocab_size.to_string(),
            self.max_decode_length.to_string(),
            self.init_scale.to_string(),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }
}

/// Number of scalar parameters of a model with this configuration:
///
/// ```text
///   (V_s + V_t)·E                        embeddings
/// + gru(E, H) + gru(D, H)                encoder, decoder; gru(I,H) = 3H·I + 3H·H + 3H
/// + [mlp]        2H·H + H                W_c, W_s
/// + [full_focus] H·(E + H)               W_f
/// + O·V_t + V_t                          output layer, O = 2H for post_rnn else H
/// ```
///
/// with decoder input width `D` = E+H (pre_rnn), H (full_focus), E (post_rnn).
pub fn count_parameters(config: &ModelConfig) -> usize {
    let (e, h) = (config.embedding_size, config.hidden_size);
    let (vs, vt) = (config.source_vocab_size, config.target_vocab_size);
    let d = config.mechanism.decoder_input_size(e, h);
    let mut n = (vs + vt) * e + GruParams::scalar_count(e, h) + GruParams::scalar_count(d, h);
    if config.alignment == AlignmentKind::Mlp {
        n += 2 * h * h + h;
    }
    if config.mechanism == MechanismKind::FullFocus {
        n += h * (e + h);
    }
    let out_width = if config.mechanism == MechanismKind::PostRnn { 2 * h } else { h };
    n + out_width * vt + vt
}
