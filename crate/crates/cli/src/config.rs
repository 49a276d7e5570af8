use std::path::Path;

use anyhow::{Context, Result};
use cse_core::corpus::ToyCorpusConfig;
use cse_core::model::ModelConfig;
use cse_core::signal::AugmentConfig;
use cse_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Eval samples need at least this many earlier turns.
    pub min_context_turns: usize,
    pub speakers: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            min_context_turns: 10,
            speakers: 2,
        }
    }
}

/// Everything a command may read from the config file. Missing sections
/// take their defaults; command-line flags override afterwards.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub corpus: ToyCorpusConfig,
    pub eval: EvalSection,
}

impl FileConfig {
    /// JSON when the extension is `.json`, TOML otherwise.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| cse_core::Error::io(path, e))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| parse_error(path, e))?
        } else {
            toml::from_str(&text).map_err(|e| parse_error(path, e))?
        };
        Ok(parsed)
    }

    /// Canonical JSON of the effective configuration, used for digests.
    pub fn canonical(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&v).expect("json value serializes")
    }
}

fn parse_error(path: &Path, e: impl std::fmt::Display) -> cse_core::Error {
    cse_core::Error::Parse {
        location: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")
        .map_err(|e| cse_core::Error::io(path, e))
        .with_context(|| format!("writing {}", path.display()))
}
