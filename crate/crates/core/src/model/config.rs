use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How the copy context that feeds the balancing factor is weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BalanceWeighting {
    /// Weighted by the copy distribution (softmax of the scores).
    #[default]
    Normalized,
    /// Weighted by the raw scaled scores, masked positions zeroed.
    Raw,
}

impl FromStr for BalanceWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(Self::Normalized),
            "raw" => Ok(Self::Raw),
            other => Err(Error::Config(format!("unknown balance_weighting {other:?}"))),
        }
    }
}

impl std::fmt::Display for BalanceWeighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Normalized => "normalized",
            Self::Raw => "raw",
        })
    }
}

/// Architecture hyperparameters.
///
/// `Default` gives the full-size configuration (about 97M parameters);
/// [`ModelConfig::desk`] is the small configuration used for tests and
/// toy experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub tie_embeddings: bool,
    /// When false the model is the plain Transformer baseline: no copy
    /// attention and no balancing factor.
    pub copy_enabled: bool,
    pub balance_weighting: BalanceWeighting,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            n_layers: 6,
            n_heads: 8,
            d_ffn: 4096,
            dropout: 0.2,
            vocab_size: 50_000,
            max_positions: 1024,
            tie_embeddings: true,
            copy_enabled: true,
            balance_weighting: BalanceWeighting::Normalized,
        }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 128,
            dropout: 0.2,
            vocab_size: 200,
            max_positions: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(format!("vocab_size {} leaves no room for the 4 special tokens", self.vocab_size)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.n_layers == 0 || self.d_ffn == 0 || self.max_positions == 0 {
            return Err(Error::Config("n_layers, d_ffn and max_positions must be positive".into()));
        }
        Ok(())
    }

    /// Flat `key=value` rendering, one key per line in fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "d_model={}", self.d_model);
        let _ = writeln!(s, "n_layers={}", self.n_layers);
        let _ = writeln!(s, "n_heads={}", self.n_heads);
        let _ = writeln!(s, "d_ffn={}", self.d_ffn);
        let _ = writeln!(s, "dropout={}", self.dropout);
        let _ = writeln!(s, "vocab_size={}", self.vocab_size);
        let _ = writeln!(s, "max_positions={}", self.max_positions);
        let _ = writeln!(s, "tie_embeddings={}", self.tie_embeddings);
        let _ = writeln!(s, "copy_enabled={}", self.copy_enabled);
        let _ = writeln!(s, "balance_weighting={}", self.balance_weighting);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let map = parse_key_values(text)?;
        let mut cfg = Self::default();
        for (k, v) in &map {
            let bad = |_| Error::Config(format!("bad value {v:?} for model key {k}"));
            match k.as_str() {
                "d_model" => cfg.d_model = v.parse().map_err(bad)?,
                "n_layers" => cfg.n_layers = v.parse().map_err(bad)?,
                "n_heads" => cfg.n_heads = v.parse().map_err(bad)?,
                "d_ffn" => cfg.d_ffn = v.parse().map_err(bad)?,
                "dropout" => cfg.dropout = v.parse().map_err(|_| Error::Config(format!("bad dropout {v:?}")))?,
                "vocab_size" => cfg.vocab_size = v.parse().map_err(bad)?,
                "max_positions" => cfg.max_positions = v.parse().map_err(bad)?,
                "tie_embeddings" => cfg.tie_embeddings = v.parse().map_err(|_| Error::Config(format!("bad bool {v:?}")))?,
                "copy_enabled" => cfg.copy_enabled = v.parse().map_err(|_| Error::Config(format!("bad bool {v:?}")))?,
                "balance_weighting" => cfg.balance_weighting = v.parse()?,
                other => return Err(Error::Config(format!("unknown model key {other}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Number of scalar parameters this configuration allocates.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let embed = self.vocab_size * d * if self.tie_embeddings { 1 } else { 3 };
        let attn = 4 * (d * d + d);
        let ffn = d * self.d_ffn + self.d_ffn + self.d_ffn * d + d;
        let ln = 2 * d;
        let enc = self.n_layers * (attn + ffn + 2 * ln);
        let dec = self.n_layers * (2 * attn + ffn + 3 * ln);
        let copy = if self.copy_enabled { 3 * d * d + d } else { 0 };
        let label = 2 * d + 2;
        embed + enc + dec + copy + label
    }
}

/// Parses flat `key=value` text; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}
