//! Run manifests: what ran, with which resolved configuration, and where its
//! artifacts went. A manifest is itself a valid `--config` input.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::CliResult;

pub const FILE_NAME: &str = "manifest.toml";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub status: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub notes: BTreeMap<String, String>,
    pub config: Config,
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: &Config) -> Self {
        Self {
            command: command.to_string(),
            seed,
            status: "running".into(),
            started_unix: now(),
            finished_unix: 0.0,
            artifacts: BTreeMap::new(),
            notes: BTreeMap::new(),
            config: config.clone(),
        }
    }

    pub fn artifact(&mut self, name: &str, path: &Path) {
        let abs = std::fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
        self.artifacts.insert(name.to_string(), abs);
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.notes.insert(key.to_string(), value.to_string());
    }

    pub fn finish(mut self, out: &Path, status: &str) -> CliResult<PathBuf> {
        self.status = status.to_string();
        self.finished_unix = now();
        let text = toml::to_string(&self).map_err(|e| crate::error::usage(format!("manifest: {e}")))?;
        let path = out.join(FILE_NAME);
        std::fs::write(&path, text)?;
        Ok(path)
    }
}
