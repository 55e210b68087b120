use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wordground::features::FEATURE_STORE_VERSION;
use wordground::model::CHECKPOINT_VERSION;

/// Sidecar describing how an artifact was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub args: Vec<String>,
    /// SHA-256 of the effective configuration text.
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub tool_version: String,
    pub checkpoint_format: u32,
    pub feature_store_format: u32,
    /// SHA-256 of every input file.
    pub inputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

impl Provenance {
    pub fn new(command: &str, config_text: &str, seeds: Vec<u64>) -> Self {
        Provenance {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config_sha256: sha256_hex(config_text.as_bytes()),
            seeds,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: CHECKPOINT_VERSION,
            feature_store_format: FEATURE_STORE_VERSION,
            inputs: BTreeMap::new(),
        }
    }

    pub fn input(mut self, path: &Path) -> Result<Self> {
        self.inputs.insert(path.display().to_string(), file_sha256(path)?);
        Ok(self)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("provenance.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
