//! Run configuration: a plain `key = value` file plus `--set` overrides.

use std::fmt;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mtnet::dataset::DatasetManifest;
use mtnet::model::{Ablation, ModelConfig};
use mtnet::training::TrainConfig;

/// Keys fixed by the dataset; setting them by hand would break pairing.
const DATASET_KEYS: [&str; 5] = ["num_classes", "audio_length", "image_height", "image_width", "image_channels"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            _ => bail!("precision must be `f32` or `f64`, got `{s}`"),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        }
    }

    /// Matches the dtype string written into checkpoint headers.
    pub fn from_dtype(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Narrow image encoder sized for one CPU core.
    Desk,
    Full,
}

impl Preset {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "full" => Ok(Self::Full),
            _ => bail!("model must be `desk` or `full`, got `{s}`"),
        }
    }

    fn as_str(&self) -> &'static str {
        match self {
            Self::Desk => "desk",
            Self::Full => "full",
        }
    }
}

/// Everything a training run needs besides the data itself.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub preset: Preset,
    pub precision: Precision,
    pub ablation: String,
    /// Model keys applied on top of the preset, in the order given.
    pub model_keys: Vec<(String, String)>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            precision: Precision::F32,
            ablation: "full".into(),
            model_keys: Vec::new(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "model" => self.preset = Preset::parse(value)?,
            "precision" => self.precision = Precision::parse(value)?,
            "ablation" => {
                Ablation::named(value)?;
                self.ablation = value.to_string();
            }
            k if DATASET_KEYS.contains(&k) => bail!("`{k}` is taken from the dataset manifest and cannot be set"),
            k => {
                if self.train.set(k, value).is_err() {
                    // probe the model key on a scratch config so a bad key fails here
                    let mut probe = ModelConfig::desk(2, 1, mtnet::model::ImageShape { height: 1, width: 1, channels: 1 });
                    probe.set(k, value).map_err(|_| anyhow::anyhow!("unknown or invalid config key `{k}` = `{value}`"))?;
                    self.model_keys.retain(|(old, _)| old != k);
                    self.model_keys.push((k.to_string(), value.to_string()));
                }
            }
        }
        Ok(())
    }

    /// Reads `key = value` lines; `#` starts a comment.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("{}:{}: expected `key = value`", path.display(), n + 1))?;
            self.set(k.trim(), v).with_context(|| format!("{}:{}", path.display(), n + 1))?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let (k, v) = s.split_once('=').with_context(|| format!("--set expects key=value, got `{s}`"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Model configuration for a dataset. A single-class set still gets a
    /// two-way head.
    pub fn model_for(&self, m: &DatasetManifest) -> Result<ModelConfig> {
        let classes = m.num_classes.max(2);
        let mut cfg = match self.preset {
            Preset::Desk => ModelConfig::desk(classes, m.audio_length, m.image_shape),
            Preset::Full => ModelConfig::new(classes, m.audio_length, m.image_shape),
        };
        cfg.ablation = Ablation::named(&self.ablation)?;
        for (k, v) in &self.model_keys {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        Ok(())
    }
}

/// Resolved configuration, one `key=value` per line.
pub struct Resolved<'a> {
    pub run: &'a RunConfig,
    pub model: &'a ModelConfig,
}

impl fmt::Display for Resolved<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "model={}", self.run.preset.as_str())?;
        writeln!(f, "precision={}", self.run.precision.as_str())?;
        writeln!(f, "ablation={}", self.run.ablation)?;
        for (k, v) in self.model.to_pairs().iter().chain(self.run.train.to_pairs().iter()) {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}
