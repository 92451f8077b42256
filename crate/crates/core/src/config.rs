//! TOML experiment files: `[model]`, `[train]` and `[data]` sections.
//!
//! Relative data paths resolve against the directory holding the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LiftError, Result};
use crate::train::TrainConfig;
use crate::vit::ViTConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub cache: PathBuf,
    pub manifest: PathBuf,
    /// Cache of class-prompt embeddings, keyed by label index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ViTConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LiftError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| LiftError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| LiftError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data.cache = resolve(base, &cfg.data.cache);
        cfg.data.manifest = resolve(base, &cfg.data.manifest);
        cfg.data.anchors = cfg.data.anchors.map(|a| resolve(base, &a));
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }
}
