//! Layered run configuration: defaults <- config file <- `--set key=value` overrides.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DataConfig {
    pub root: String,
    pub image_size: usize,
    pub k: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: "data".into(),
            image_size: 352,
            k: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub c_d: usize,
    /// `toy` or `resnet50:<weights-path>`.
    pub encoder: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c_d: 64,
            encoder: "toy".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ReferenceConfig {
    /// `gt`, `constant`, or `model:<weights-path>`.
    pub provider: String,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            provider: "gt".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossConfig {
    pub weighted: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { weighted: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 5e-4,
            lr_floor: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RmgConfig {
    /// `linear` (learned map from the common representation) or `identity`.
    pub kernel_from_e: String,
    pub lstm_kernel: usize,
}

impl Default for RmgConfig {
    fn default() -> Self {
        Self {
            kernel_from_e: "linear".into(),
            lstm_kernel: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RfeConfig {
    /// `on` or `off`: the finer-to-coarser cross-scale path.
    pub cross_scale_path: String,
}

impl Default for RfeConfig {
    fn default() -> Self {
        Self {
            cross_scale_path: "on".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub reference: ReferenceConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub rmg: RmgConfig,
    pub rfe: RfeConfig,
    pub output: OutputConfig,
}

const ALLOWED_C_D: [usize; 5] = [16, 32, 64, 128, 256];

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Apply one `section.key=value` override on top of the current config.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        let key = key.trim();
        let value = value.trim();
        // Route through the TOML layer so types stay consistent with the file format.
        let mut doc: toml::Value = toml::from_str(&self.to_toml())
            .map_err(|e| Error::Config(format!("internal config round-trip failed: {e}")))?;
        let mut parts = key.split('.').collect::<Vec<_>>();
        let leaf = parts
            .pop()
            .ok_or_else(|| Error::Config(format!("empty override key '{key}'")))?;
        let mut cursor = &mut doc;
        for part in parts {
            cursor = cursor
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config section '{part}'")))?;
        }
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{key}' does not address a config table")))?;
        let existing = table
            .get(leaf)
            .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
        let parsed = match existing {
            toml::Value::String(_) => toml::Value::String(value.to_string()),
            toml::Value::Integer(_) => toml::Value::Integer(
                value
                    .parse()
                    .map_err(|_| Error::Config(format!("'{key}' expects an integer")))?,
            ),
            toml::Value::Float(_) => toml::Value::Float(
                value
                    .parse()
                    .map_err(|_| Error::Config(format!("'{key}' expects a float")))?,
            ),
            toml::Value::Boolean(_) => toml::Value::Boolean(
                value
                    .parse()
                    .map_err(|_| Error::Config(format!("'{key}' expects true/false")))?,
            ),
            _ => return Err(Error::Config(format!("'{key}' has unsupported type"))),
        };
        table.insert(leaf.to_string(), parsed);
        *self = toml::Value::try_into(doc)
            .map_err(|e| Error::Config(format!("override '{assignment}' rejected: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.image_size < 32 || self.data.image_size % 32 != 0 {
            return Err(Error::Config(format!(
                "data.image_size must be a positive multiple of 32, got {}",
                self.data.image_size
            )));
        }
        if !ALLOWED_C_D.contains(&self.model.c_d) {
            return Err(Error::Config(format!(
                "model.c_d must be one of {ALLOWED_C_D:?}, got {}",
                self.model.c_d
            )));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.train.steps == 0 {
            return Err(Error::Config("train.steps must be >= 1".into()));
        }
        if !(self.train.lr.is_finite() && self.train.lr > 0.0) {
            return Err(Error::Config("train.lr must be a positive float".into()));
        }
        if self.rmg.kernel_from_e != "linear" && self.rmg.kernel_from_e != "identity" {
            return Err(Error::Config(format!(
                "rmg.kernel_from_e must be 'linear' or 'identity', got '{}'",
                self.rmg.kernel_from_e
            )));
        }
        if self.rmg.lstm_kernel % 2 == 0 {
            return Err(Error::Config("rmg.lstm_kernel must be odd".into()));
        }
        if self.rfe.cross_scale_path != "on" && self.rfe.cross_scale_path != "off" {
            return Err(Error::Config(format!(
                "rfe.cross_scale_path must be 'on' or 'off', got '{}'",
                self.rfe.cross_scale_path
            )));
        }
        if self.model.encoder != "toy" && !self.model.encoder.starts_with("resnet50:") {
            return Err(Error::Config(format!(
                "model.encoder must be 'toy' or 'resnet50:<weights-path>', got '{}'",
                self.model.encoder
            )));
        }
        let p = &self.reference.provider;
        if p != "gt" && p != "constant" && !p.starts_with("model:") {
            return Err(Error::Config(format!(
                "reference.provider must be 'gt', 'constant' or 'model:<weights-path>', got '{p}'"
            )));
        }
        Ok(())
    }

    pub fn cross_scale_path(&self) -> bool {
        self.rfe.cross_scale_path == "on"
    }
}
