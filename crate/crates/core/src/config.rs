//! Run configuration files (TOML).
//!
//! Every section is optional and every field has a default; unknown keys are
//! rejected. The resolved configuration is written next to run outputs so a
//! run can be repeated from its echo alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{LoadOptions, SyntheticConfig};
use crate::error::{Error, Result};
use crate::training::TrainConfig;

pub const ECHO_FILE: &str = "config_echo.toml";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataOptions {
    /// Fold every label above this value into "other".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub merge_labels_above: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Held-out labels; defaults to `<data>/eval_labels`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
    pub data: DataOptions,
    pub paths: Paths,
}

fn toml_error(source: &str, e: toml::de::Error) -> Error {
    let location = e
        .span()
        .map(|s| {
            let line = source[..s.start.min(source.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        })
        .unwrap_or_default();
    Error::Config(format!("{}{location}", e.message()))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| toml_error(text, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synthetic.validate()
    }

    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn write_echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(ECHO_FILE);
        fs::write(&path, self.echo()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            bands: self.train.model.in_bands,
            num_classes: self.train.dcs.num_classes,
            merge_above: self.data.merge_labels_above,
        }
    }

    /// Sets the seed of training and data generation alike.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synthetic.seed = seed;
    }
}

/// Recursively overlays `delta` onto `base`; tables merge, other values replace.
pub fn merge_toml(base: &mut toml::Table, delta: &toml::Table) {
    for (k, v) in delta {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(d)) => merge_toml(b, d),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// `base` with `delta` overlaid, re-validated.
pub fn with_overrides<T>(base: &T, delta: &toml::Table) -> Result<T>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    let mut table = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    merge_toml(&mut table, delta);
    let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
    toml::from_str(&text).map_err(|e| toml_error(&text, e))
}
