//! Run configuration: a TOML file with a dotted-key namespace, optionally
//! overridden by `key=value` pairs. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::losses::LossWeights;
use crate::model::ModelConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid override `{0}`: expected key=value")]
    Override(String),
    #[error("invalid value for {key}: {msg}")]
    Value { key: &'static str, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_iters: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub image_size: usize,
    pub lsj: bool,
    pub lsj_min: f64,
    pub lsj_max: f64,
    pub checkpoint_every: usize,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5625,
            batch_size: 2,
            base_lr: 1e-4,
            warmup_iters: 100,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            seed: 0,
            image_size: 128,
            lsj: true,
            lsj_min: 0.5,
            lsj_max: 2.0,
            checkpoint_every: 500,
            loss_weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Fixed attribute-F1 threshold for the joint metric; the IoU sweep is used when unset.
    pub f1_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::Value {
            key: "model",
            msg: e.to_string(),
        })?;
        let t = &self.train;
        let fail = |key: &'static str, msg: &str| {
            Err(ConfigError::Value {
                key,
                msg: msg.to_string(),
            })
        };
        if t.iterations == 0 {
            return fail("train.iterations", "must be positive");
        }
        if t.batch_size == 0 {
            return fail("train.batch_size", "must be positive");
        }
        if !(t.base_lr >= 0.0 && t.base_lr.is_finite()) {
            return fail("train.base_lr", "must be finite and non-negative");
        }
        if t.grad_clip <= 0.0 {
            return fail("train.grad_clip", "must be positive");
        }
        if t.image_size == 0 || t.image_size % 32 != 0 {
            return fail("train.image_size", "must be a positive multiple of 32");
        }
        if !(0.0 < t.lsj_min && t.lsj_min <= t.lsj_max) {
            return fail("train.lsj_min", "need 0 < lsj_min <= lsj_max");
        }
        if t.checkpoint_every == 0 {
            return fail("train.checkpoint_every", "must be positive");
        }
        if let Some(f) = self.eval.f1_threshold {
            if !(0.0..=1.0).contains(&f) {
                return fail("eval.f1_threshold", "must lie in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// Sets `a.b.c = value`, parsing `value` as a TOML value and falling back
/// to a bare string.
fn apply_override(table: &mut toml::Table, pair: &str) -> Result<(), ConfigError> {
    let (key, raw) = pair.split_once('=').ok_or_else(|| ConfigError::Override(pair.to_string()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(pair.to_string()));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(format!("{pair} ({part} is not a table)")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
