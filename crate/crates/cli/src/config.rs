use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use eslong::encoder::ModelConfig;
use eslong::head::HeadConfig;
use eslong::training::TrainConfig;
use serde::{Deserialize, Serialize};

/// A model section is either `{"preset": "toy"}` or a full model config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSection {
    Preset { preset: String },
    Full(ModelConfig),
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let cfg = match self {
            Self::Preset { preset } => ModelConfig::preset(preset)?,
            Self::Full(c) => c.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self::Preset { preset: "toy".into() }
    }
}

/// The JSON config file accepted by every command; each command reads the
/// sections it needs and flags override file values.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub head: HeadConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }
}
