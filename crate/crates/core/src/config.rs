//! Declarative TOML configuration with dotted-key overrides.

use std::fs;
use std::path::{Path, PathBuf};

use fan_tensor::AdamConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{FanError, Result};
use crate::losses::LossWeights;
use crate::model::{LatentSplit, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig::adam(1e-3, 0.9)
    }
}

impl OptimConfig {
    pub fn adam(lr: f32, beta1: f32) -> Self {
        OptimConfig {
            lr,
            beta1,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn to_adam(self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(FanError::Config(format!("invalid optimizer settings for {name}: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub split: LatentSplit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Full,
            split: LatentSplit::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub source_epochs: usize,
    pub target_epochs: usize,
    pub source_optim: OptimConfig,
    pub target_optim: OptimConfig,
    pub discriminator_optim: OptimConfig,
    pub weights: LossWeights,
    /// Discriminator updates per target-encoder update.
    pub disc_steps: usize,
    pub seed: u64,
    /// Steps between evaluations on the held-out set; 0 evaluates only at
    /// the end of each stage.
    pub eval_every: usize,
    /// Cap on held-out images used by periodic evaluations.
    pub eval_samples: Option<usize>,
    /// Epochs between checkpoints; 0 writes none mid-stage.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            source_epochs: 30,
            target_epochs: 20,
            source_optim: OptimConfig::adam(1e-3, 0.9),
            target_optim: OptimConfig::adam(2e-4, 0.5),
            discriminator_optim: OptimConfig::adam(2e-4, 0.5),
            weights: LossWeights::default(),
            disc_steps: 1,
            seed: 0,
            eval_every: 0,
            eval_samples: None,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(FanError::Config(format!(
                "batch_size must be at least 2 for batch norm, got {}",
                self.batch_size
            )));
        }
        if self.disc_steps == 0 {
            return Err(FanError::Config("disc_steps must be at least 1".into()));
        }
        if self.eval_samples == Some(0) {
            return Err(FanError::Config("eval_samples must be positive".into()));
        }
        self.weights.validate()?;
        self.source_optim.validate("source_optim")?;
        self.target_optim.validate("target_optim")?;
        self.discriminator_optim.validate("discriminator_optim")
    }
}

/// Reads and parses a TOML file. A missing or malformed file is a
/// configuration error.
pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| FanError::Config(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| FanError::Config(format!("{}: {e}", path.display())))
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| FanError::Config(format!("cannot serialize config: {e}")))
}

/// Writes the fully resolved configuration.
pub fn write_frozen<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| FanError::io(dir, e))?;
    }
    fs::write(path, to_toml(value)?).map_err(|e| FanError::io(path, e))
}

fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| FanError::Config(format!("override `{raw}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(FanError::Config(format!("override `{raw}` has an empty key segment")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

/// Applies `key.path=value` overrides. Values use TOML syntax; anything that
/// does not parse as TOML is taken as a bare string. Unknown keys are
/// rejected when the result is deserialized.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(value: &T, overrides: &[String]) -> Result<T> {
    let mut root = toml::Value::try_from(value).map_err(|e| FanError::Config(e.to_string()))?;
    for raw in overrides {
        let (path, new) = parse_override(raw)?;
        let mut node = &mut root;
        for (i, seg) in path.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| FanError::Config(format!("override `{raw}`: `{seg}` is not inside a table")))?;
            if i + 1 == path.len() {
                table.insert(seg.clone(), new.clone());
                break;
            }
            node = table
                .entry(seg.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
    }
    root.try_into()
        .map_err(|e| FanError::Config(format!("after overrides {overrides:?}: {e}")))
}
