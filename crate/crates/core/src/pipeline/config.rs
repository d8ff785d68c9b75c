use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::ModelConfig;
use crate::backbone::INPUT_MULTIPLE;
use crate::data::{EdgeMethod, SynthSpec};
use crate::error::{Error, Result};

/// Optimization and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub input_size: usize,
    /// Monte Carlo dropout samples per uncertainty estimate.
    pub mc_samples: usize,
    /// Forward passes per Monte Carlo chunk; bounds peak memory only.
    pub mc_chunk: usize,
    /// Epochs between task-weight and variance-map refreshes.
    pub weight_update_period: usize,
    /// Size of the fixed validation mini-batch used for task weights.
    pub weight_batch: usize,
    pub seed: u64,
    pub augment: bool,
    /// Train the region branch alone for the first half of the epochs,
    /// then freeze it and train the vessel branch.
    pub two_stage: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 4,
            lr: 2e-3,
            weight_decay: 1e-4,
            input_size: 64,
            mc_samples: 10,
            mc_chunk: 2,
            weight_update_period: 5,
            weight_batch: 4,
            seed: 0,
            augment: false,
            two_stage: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch", self.batch),
            ("input_size", self.input_size),
            ("mc_samples", self.mc_samples),
            ("mc_chunk", self.mc_chunk),
            ("weight_update_period", self.weight_update_period),
            ("weight_batch", self.weight_batch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(format!("train.{name} must be positive")));
            }
        }
        if self.input_size % INPUT_MULTIPLE != 0 {
            return Err(Error::validation(format!(
                "train.input_size must be divisible by {INPUT_MULTIPLE}, got {}",
                self.input_size
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation("train.lr must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::validation("train.weight_decay must be non-negative"));
        }
        toml_seed("train.seed", self.seed)
    }

    /// Epochs (1-based) after which task weights are refreshed.
    pub fn update_epochs(&self) -> Vec<usize> {
        (1..=self.epochs)
            .filter(|e| e % self.weight_update_period == 0)
            .collect()
    }
}

// TOML integers are signed 64-bit.
fn toml_seed(name: &str, seed: u64) -> Result<()> {
    if seed > i64::MAX as u64 {
        return Err(Error::validation(format!(
            "{name} must not exceed {}",
            i64::MAX
        )));
    }
    Ok(())
}

/// Where samples come from: a directory in the documented layout, or the
/// synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub samples: usize,
    pub synth_seed: u64,
    pub split_seed: u64,
    pub synth: SynthSpec,
    pub edges: EdgeMethod,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            samples: 200,
            synth_seed: 1000,
            split_seed: 0,
            synth: SynthSpec::default(),
            edges: EdgeMethod::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Full-resolution settings: 384x384 inputs, 300 epochs, weight refresh
    /// every 50 epochs, learning rate 1e-4.
    pub fn full_scale() -> Self {
        let mut c = Self::default();
        c.train.epochs = 300;
        c.train.lr = 1e-4;
        c.train.input_size = 384;
        c.train.weight_update_period = 50;
        c.train.augment = true;
        c.data.synth.image_size = 384;
        c.model.backbone.base_channels = 32;
        c.model.backbone.routed_channels = 128;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        toml_seed("data.synth_seed", self.data.synth_seed)?;
        toml_seed("data.split_seed", self.data.split_seed)?;
        self.model.validate()?;
        if self.data.root.is_none() {
            self.data.synth.validate()?;
            if self.data.synth.image_size != self.train.input_size {
                return Err(Error::validation(format!(
                    "data.synth.image_size ({}) differs from train.input_size ({})",
                    self.data.synth.image_size, self.train.input_size
                )));
            }
            if self.data.samples < 3 {
                return Err(Error::validation(
                    "data.samples must be at least 3 to fill the train, validation and test splits",
                ));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_value(toml::from_str(text).map_err(|e| Error::validation(e.to_string()))?)
    }

    fn from_value(value: toml::Value) -> Result<Self> {
        let cfg: Self = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::validation(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or defaults when `None`) and applies `key.path=value`
    /// overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Value>(&text)
                    .map_err(|e| Error::validation(format!("{}: {e}", p.display())))?
            }
            None => toml::Value::try_from(Self::default())
                .map_err(|e| Error::validation(e.to_string()))?,
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    /// `self` with `key.path=value` overrides applied.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value =
            toml::Value::try_from(self).map_err(|e| Error::validation(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::validation(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

/// Sets a dotted key inside a TOML table. The right-hand side is parsed as
/// a TOML value when possible and taken as a string otherwise.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::validation(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node.as_table_mut().ok_or_else(|| {
            Error::validation(format!("override `{key}`: `{part}` is not a table"))
        })?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node.as_table_mut().ok_or_else(|| {
        Error::validation(format!("override `{key}` does not name a table entry"))
    })?;
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}
