use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Failure;

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_hash(path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Record of one command run, written once at the end.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub command: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub config: serde_json::Value,
    /// Artifact name → content hash.
    pub artifacts: BTreeMap<String, String>,
    pub metrics: serde_json::Value,
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed,
            started_unix: unix_now(),
            finished_unix: 0,
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            artifacts: BTreeMap::new(),
            metrics: serde_json::Value::Null,
            notes: Vec::new(),
        }
    }

    pub fn artifact(&mut self, name: &str, hash: String) {
        self.artifacts.insert(name.to_string(), hash);
    }

    pub fn set_metrics(&mut self, metrics: &impl Serialize) {
        self.metrics = serde_json::to_value(metrics).unwrap_or(serde_json::Value::Null);
    }

    /// Stamp the finish time and write via temp file + rename.
    pub fn write(mut self, path: &Path) -> Result<(), Failure> {
        self.finished_unix = unix_now();
        let text = serde_json::to_string_pretty(&self).map_err(|e| Failure::Runtime(e.to_string()))?;
        ganmark::checkpoint::write_atomic(path, format!("{text}\n").as_bytes())?;
        Ok(())
    }
}
