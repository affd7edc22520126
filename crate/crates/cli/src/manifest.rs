//! Run manifests: what was run, with which configuration, producing which files.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::commands::CliError;

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("RITP_GIT_REV"));

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: Option<String>,
    pub config: Option<serde_json::Value>,
    pub ablations: Vec<String>,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario_ids: Option<Vec<String>>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.into(),
            version: VERSION.into(),
            seed,
            config_hash: None,
            config: None,
            ablations: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            scenario_ids: None,
        }
    }

    pub fn with_config(mut self, cfg: &ritp_learn::config::RunConfig) -> Self {
        let json = cfg.canonical_json();
        self.config_hash = Some(sha256_hex(json.as_bytes()));
        self.config = serde_json::from_str(&json).ok();
        self.ablations = cfg.ablations();
        self
    }

    fn entry(base: &Path, path: &Path) -> Result<FileEntry, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let rel = path.strip_prefix(base).unwrap_or(path);
        Ok(FileEntry {
            path: rel.display().to_string(),
            sha256: sha256_hex(&bytes),
        })
    }

    pub fn input(&mut self, base: &Path, path: &Path) -> Result<(), CliError> {
        self.inputs.push(Self::entry(base, path)?);
        Ok(())
    }

    pub fn output(&mut self, base: &Path, path: &Path) -> Result<(), CliError> {
        self.outputs.push(Self::entry(base, path)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }
}
