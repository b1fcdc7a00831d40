//! Run manifests: what a command did, with which configuration and where
//! its outputs went.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the resolved configuration as JSON.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<PathBuf>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn config_hash(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("JSON values serialise");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: Option<u64>, started_unix: u64) -> Result<Self> {
        let config = serde_json::to_value(config).context("serialising run config")?;
        Ok(Self {
            command: command.to_string(),
            config_hash: config_hash(&config),
            config,
            seed,
            started_unix,
            finished_unix: 0,
            outputs: Vec::new(),
        })
    }

    pub fn write(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_unix = unix_now();
        let path = dir.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
