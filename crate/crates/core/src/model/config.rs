//! Plain-text `key = value` configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which network a config builds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Dual path → attractors → FiLM → triple-path blocks.
    SepTda,
    /// A stack of dual-path blocks with a fixed speaker split, used only for
    /// the size comparisons of ablated variants.
    DualPath,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::SepTda => "septda",
            Architecture::DualPath => "dualpath",
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "septda" => Ok(Architecture::SepTda),
            "dualpath" => Ok(Architecture::DualPath),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub sample_rate: u32,
    /// Encoder kernel `L`; the stride is `L / 2`.
    pub kernel_size: usize,
    /// `D_e`.
    pub encoder_dim: usize,
    /// `D`.
    pub model_dim: usize,
    /// `K`.
    pub chunk_size: usize,
    /// `H`, per direction.
    pub lstm_hidden: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    /// `M`.
    pub tda_layers: usize,
    /// `N`.
    pub triple_blocks: usize,
    pub dual_blocks: usize,
    /// `C_max`.
    pub max_speakers: usize,
    pub t5_buckets: usize,
    pub t5_max_distance: usize,
    pub use_lstm: bool,
    pub use_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl ModelConfig {
    /// The full-size separator.
    pub fn reference() -> Self {
        Self {
            architecture: Architecture::SepTda,
            sample_rate: 8000,
            kernel_size: 16,
            encoder_dim: 256,
            model_dim: 128,
            chunk_size: 96,
            lstm_hidden: 256,
            heads: 4,
            ffn_expansion: 4,
            tda_layers: 2,
            triple_blocks: 8,
            dual_blocks: 1,
            max_speakers: 5,
            t5_buckets: 32,
            t5_max_distance: 128,
            use_lstm: true,
            use_attention: true,
        }
    }

    /// A small model that trains in minutes on a CPU.
    pub fn toy() -> Self {
        Self {
            encoder_dim: 64,
            model_dim: 32,
            chunk_size: 16,
            lstm_hidden: 32,
            heads: 2,
            tda_layers: 1,
            triple_blocks: 2,
            max_speakers: 3,
            ..Self::reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.kernel_size < 2 || self.kernel_size % 2 != 0 {
            return bad(format!("kernel_size must be even and >= 2, got {}", self.kernel_size));
        }
        for (name, v) in [
            ("encoder_dim", self.encoder_dim),
            ("model_dim", self.model_dim),
            ("lstm_hidden", self.lstm_hidden),
            ("heads", self.heads),
            ("ffn_expansion", self.ffn_expansion),
            ("tda_layers", self.tda_layers),
            ("triple_blocks", self.triple_blocks),
            ("dual_blocks", self.dual_blocks),
            ("max_speakers", self.max_speakers),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        if self.model_dim % self.heads != 0 {
            return bad(format!("model_dim {} is not divisible by heads {}", self.model_dim, self.heads));
        }
        if self.chunk_size < 2 {
            return bad(format!("chunk_size must be >= 2, got {}", self.chunk_size));
        }
        if self.t5_buckets < 4 || self.t5_buckets % 2 != 0 {
            return bad(format!("t5_buckets must be even and >= 4, got {}", self.t5_buckets));
        }
        if self.t5_max_distance <= self.t5_buckets / 4 {
            return bad(format!("t5_max_distance must exceed t5_buckets / 4, got {}", self.t5_max_distance));
        }
        if !self.use_lstm && !self.use_attention {
            return bad("at least one of use_lstm and use_attention must be enabled".into());
        }
        Ok(())
    }

    /// `(key, value)` pairs in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("architecture", self.architecture.as_str().to_string()),
            ("sample_rate", self.sample_rate.to_string()),
            ("kernel_size", self.kernel_size.to_string()),
            ("encoder_dim", self.encoder_dim.to_string()),
            ("model_dim", self.model_dim.to_string()),
            ("chunk_size", self.chunk_size.to_string()),
            ("lstm_hidden", self.lstm_hidden.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_expansion", self.ffn_expansion.to_string()),
            ("tda_layers", self.tda_layers.to_string()),
            ("triple_blocks", self.triple_blocks.to_string()),
            ("dual_blocks", self.dual_blocks.to_string()),
            ("max_speakers", self.max_speakers.to_string()),
            ("t5_buckets", self.t5_buckets.to_string()),
            ("t5_max_distance", self.t5_max_distance.to_string()),
            ("use_lstm", self.use_lstm.to_string()),
            ("use_attention", self.use_attention.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    /// Takes the model keys out of `map`, starting from the reference values.
    pub fn from_map(map: &mut BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::reference();
        take(map, "architecture", &mut c.architecture)?;
        take(map, "sample_rate", &mut c.sample_rate)?;
        take(map, "kernel_size", &mut c.kernel_size)?;
        take(map, "encoder_dim", &mut c.encoder_dim)?;
        take(map, "model_dim", &mut c.model_dim)?;
        take(map, "chunk_size", &mut c.chunk_size)?;
        take(map, "lstm_hidden", &mut c.lstm_hidden)?;
        take(map, "heads", &mut c.heads)?;
        take(map, "ffn_expansion", &mut c.ffn_expansion)?;
        take(map, "tda_layers", &mut c.tda_layers)?;
        take(map, "triple_blocks", &mut c.triple_blocks)?;
        take(map, "dual_blocks", &mut c.dual_blocks)?;
        take(map, "max_speakers", &mut c.max_speakers)?;
        take(map, "t5_buckets", &mut c.t5_buckets)?;
        take(map, "t5_max_distance", &mut c.t5_max_distance)?;
        take(map, "use_lstm", &mut c.use_lstm)?;
        take(map, "use_attention", &mut c.use_attention)?;
        c.validate()?;
        Ok(c)
    }

    /// Parses model keys only; any other key is an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = parse_pairs(text)?;
        let c = Self::from_map(&mut map)?;
        reject_leftovers(&map)?;
        Ok(c)
    }

    /// Errors naming the first field that differs from `expected`.
    pub fn ensure_matches(&self, expected: &ModelConfig) -> Result<()> {
        for ((k, found), (_, want)) in self.entries().into_iter().zip(expected.entries()) {
            if found != want {
                return Err(Error::ConfigMismatch {
                    field: k.to_string(),
                    expected: want,
                    found,
                });
            }
        }
        Ok(())
    }
}

/// Parses `key = value` lines; `#` starts a comment. Duplicate keys are errors.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(map)
}

pub(crate) fn take<V: FromStr>(map: &mut BTreeMap<String, String>, key: &str, slot: &mut V) -> Result<()> {
    if let Some(raw) = map.remove(key) {
        *slot = raw
            .parse()
            .map_err(|_| Error::Config(format!("invalid value `{raw}` for `{key}`")))?;
    }
    Ok(())
}

pub(crate) fn reject_leftovers(map: &BTreeMap<String, String>) -> Result<()> {
    if let Some(k) = map.keys().next() {
        return Err(Error::Config(format!("unknown configuration key `{k}`")));
    }
    Ok(())
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    Ok(std::fs::read_to_string(path)?)
}
