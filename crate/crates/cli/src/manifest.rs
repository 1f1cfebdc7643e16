//! Dataset manifest: every artifact written by `gen-data` with its seed and
//! payload hash, plus the exact configuration used. Paths are relative to
//! the dataset directory so identical runs produce identical manifests.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub kind: String,
    pub split: String,
    pub id: String,
    /// Header path relative to the dataset dir.
    pub path: String,
    pub seed: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: RunConfig,
    pub artifacts: Vec<ArtifactEntry>,
}

impl DatasetManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_vec_pretty(self)?)
            .with_context(|| format!("writing {path:?}"))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<DatasetManifest> {
        let path = dir.join("manifest.json");
        let bytes = std::fs::read(&path).with_context(|| format!("reading {path:?}"))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn entries_of(&self, kind: &str, split: &str) -> Vec<&ArtifactEntry> {
        self.artifacts
            .iter()
            .filter(|a| a.kind == kind && a.split == split)
            .collect()
    }
}

/// Hash the header file plus its raw payload (header names the payload via
/// `data_file`, so both are covered in one digest).
pub fn hash_artifact(header_path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let header = std::fs::read(header_path)?;
    hasher.update(&header);
    let parsed: serde_json::Value = serde_json::from_slice(&header)?;
    if let Some(data_file) = parsed.get("data_file").and_then(|v| v.as_str()) {
        let raw = header_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(data_file);
        hasher.update(std::fs::read(&raw).with_context(|| format!("reading payload {raw:?}"))?);
    }
    Ok(hex_string(&hasher.finalize()))
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
