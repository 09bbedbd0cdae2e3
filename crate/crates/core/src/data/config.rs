//! TOML experiment configuration with sections `[train]`, `[model]`,
//! `[data]` and `[eval]`. Absent keys take their defaults; unknown keys are
//! rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SynthSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Drop a pair's training positives from its candidate ranking.
    pub exclude_train: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![50, 100],
            exclude_train: true,
        }
    }
}

impl EvalConfig {
    pub fn check(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::config("eval.ks", "needs at least one positive cutoff"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub data: SynthSpec,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn check(&self) -> Result<()> {
        self.train.check()?;
        self.model.check()?;
        self.data.check()?;
        self.eval.check()
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<document>", e.to_string()))?;
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        Error::config(key, e.into_inner().message().trim().to_string())
    })?;
    cfg.check()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
