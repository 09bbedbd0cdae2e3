//! Run manifests: what was run, with which resolved configuration, and
//! where its artifacts went.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use dsmoe::data::ExperimentConfig;
use dsmoe::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
/// Resolved configuration, usable as `--config` to replay a run.
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name.
    pub args: Vec<String>,
    pub config: ExperimentConfig,
    pub seed: u64,
    /// Artifact name to path relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
    pub tool_version: String,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, args: &[String], config: &ExperimentConfig, seed: u64) -> Self {
        Self {
            command: command.into(),
            args: args.to_vec(),
            config: config.clone(),
            seed,
            artifacts: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            duration_secs: 0.0,
        }
    }

    pub fn artifact(&mut self, name: &str, rel_path: &str) {
        self.artifacts.insert(name.into(), rel_path.into());
    }

    /// Writes `manifest.json` and `config.toml` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let toml = toml::to_string(&self.config).map_err(|e| Error::Config {
            key: "<document>".into(),
            message: e.to_string(),
        })?;
        write_atomic(&dir.join(CONFIG_FILE), toml.as_bytes())?;
        let json = serde_json::to_string_pretty(self)? + "\n";
        write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Write to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
