//! Per-run provenance record.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    /// Fully resolved configuration, defaults included.
    pub config: BTreeMap<String, String>,
    /// Digests of the inputs the run consumed (dataset, checkpoint, ...).
    pub inputs: BTreeMap<String, String>,
    pub content_hash: String,
    pub out_dir: String,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Git-style blob digest: `sha256("blob <len>\0" ++ content)`.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

impl RunManifest {
    pub fn new(
        command: &str,
        config_path: Option<&Path>,
        config: BTreeMap<String, String>,
        inputs: BTreeMap<String, String>,
        out_dir: &Path,
    ) -> Self {
        let version = env!("CARGO_PKG_VERSION").to_string();
        let canonical = serde_json::json!({
            "version": version,
            "command": command,
            "config": config,
            "inputs": inputs,
        });
        let content_hash = blob_hash(canonical.to_string().as_bytes());
        Self {
            command: command.into(),
            config_path: config_path.map(|p| p.display().to_string()),
            config,
            inputs,
            content_hash,
            out_dir: out_dir.display().to_string(),
            version,
            started_unix: now(),
            finished_unix: None,
        }
    }

    pub fn write(&self, out_dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(out_dir)?;
        fs::write(out_dir.join(RUN_MANIFEST), serde_json::to_string_pretty(self).map_err(aseg_core::Error::from)?)?;
        Ok(())
    }

    pub fn finish(&mut self, out_dir: &Path) -> Result<(), CliError> {
        self.finished_unix = Some(now());
        self.write(out_dir)
    }
}
