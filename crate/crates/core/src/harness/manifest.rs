//! Run manifest written next to every output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::Result;

use super::train::TrainConfig;

/// Build identifier: `LVT_BUILD_ID` at compile time, else the package version.
pub fn build_id() -> String {
    option_env!("LVT_BUILD_ID")
        .map(str::to_owned)
        .unwrap_or_else(|| format!("lvt-core {}", env!("CARGO_PKG_VERSION")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub seed: u64,
    pub build: String,
}

impl Manifest {
    pub fn new(command: &str, model: ModelConfig, train: Option<TrainConfig>, seed: u64) -> Self {
        Self {
            command: command.into(),
            model,
            train,
            seed,
            build: build_id(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
