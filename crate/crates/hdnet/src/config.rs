//! JSON run and ablation-suite configuration.
//!
//! Values resolve in three layers: built-in defaults, then the config file,
//! then command-line flags. Relative data paths are taken relative to the
//! config file's directory.

use std::path::{Path, PathBuf};

use hdnet_core::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{read_string, Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory with images, annotations and ground truth.
    pub train: PathBuf,
    #[serde(default)]
    pub val: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub schema_version: u32,
    /// Widths and scalars shared by every variant.
    #[serde(default)]
    pub base_model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Names of the variants to run; all when absent.
    #[serde(default)]
    pub variants: Option<Vec<String>>,
    pub data: DataConfig,
}

fn config_error(path: &Path, field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config { file: path.display().to_string(), field: field.into(), message: message.into() }
}

/// Parses JSON, reporting the failing field path on error.
fn parse<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_string(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = match e.path().to_string() {
            p if p == "." => "<root>".to_string(),
            p => p,
        };
        config_error(path, field, e.into_inner().to_string())
    })
}

fn check_version(path: &Path, v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(config_error(
            path,
            "schema_version",
            format!("unsupported version {v}, expected {SCHEMA_VERSION}"),
        ));
    }
    Ok(())
}

impl DataConfig {
    fn resolve(&mut self, base: &Path) {
        fn join(base: &Path, p: &PathBuf) -> PathBuf {
            if p.is_relative() {
                base.join(p)
            } else {
                p.clone()
            }
        }
        self.train = join(base, &self.train);
        self.val = self.val.as_ref().map(|v| join(base, v));
    }
}

fn base_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = parse(path)?;
        check_version(path, cfg.schema_version)?;
        cfg.data.resolve(base_dir(path));
        cfg.validate(path)?;
        Ok(cfg)
    }

    pub fn validate(&self, path: &Path) -> Result<()> {
        self.model.validate().map_err(|e| Error::in_section(path, "model", e))?;
        self.train.validate().map_err(|e| Error::in_section(path, "train", e))
    }
}

impl SuiteConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: SuiteConfig = parse(path)?;
        check_version(path, cfg.schema_version)?;
        cfg.data.resolve(base_dir(path));
        cfg.base_model.validate().map_err(|e| Error::in_section(path, "base_model", e))?;
        cfg.train.validate().map_err(|e| Error::in_section(path, "train", e))?;
        if cfg.seeds.len() < 3 {
            return Err(config_error(path, "seeds", "at least 3 seeds are required"));
        }
        if cfg.data.val.is_none() {
            return Err(config_error(path, "data.val", "an ablation needs a validation set"));
        }
        Ok(cfg)
    }
}
