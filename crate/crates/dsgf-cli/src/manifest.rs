//! Run manifests: every subcommand records its command line, resolved
//! configuration, input fingerprints, seed and produced artifacts, so a run
//! can be reproduced from the manifest alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    /// Content hashes of the input files, keyed by role (schema, corpus, ...).
    pub fingerprints: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub artifacts: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
}

pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    fingerprints: BTreeMap<String, String>,
    seed: Option<u64>,
    artifacts: Vec<String>,
    started_at: chrono::DateTime<chrono::Utc>,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config: serde_json::Value::Null,
            fingerprints: BTreeMap::new(),
            seed: None,
            artifacts: Vec::new(),
            started_at: chrono::Utc::now(),
        }
    }

    pub fn config<T: Serialize>(&mut self, cfg: &T) -> Result<&mut Self> {
        self.config = serde_json::to_value(cfg)?;
        Ok(self)
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<&mut Self> {
        let fp = dsgf_core::schema::file_fingerprint(path)?;
        self.fingerprints.insert(role.to_string(), fp);
        Ok(self)
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.seed = Some(seed);
        self
    }

    pub fn artifact(&mut self, path: &Path) -> &mut Self {
        self.artifacts.push(path.display().to_string());
        self
    }

    /// Write `<out_dir>/manifest.json`.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir)?;
        let manifest = RunManifest {
            command: self.command.clone(),
            argv: std::env::args().collect(),
            config: self.config.clone(),
            fingerprints: self.fingerprints.clone(),
            seed: self.seed,
            artifacts: self.artifacts.clone(),
            started_at: self.started_at.to_rfc3339(),
            finished_at: chrono::Utc::now().to_rfc3339(),
        };
        let path = out_dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(path)
    }
}
