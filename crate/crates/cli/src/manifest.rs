use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Record of one command invocation. Written once before work starts and
/// again with artifact hashes at the end; holds no timestamps so identical
/// reruns produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub config_path: PathBuf,
    /// The configuration after every override, exactly as executed.
    pub resolved: Value,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Output-relative path to hex SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub complete: bool,
}

impl RunManifest {
    pub fn path(out: &Path, command: &str) -> PathBuf {
        out.join(format!("manifest_{command}.json"))
    }

    pub fn write(&self) -> Result<()> {
        let path = Self::path(&self.out_dir, &self.command);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn record(&mut self, artifact: &Path) -> Result<()> {
        let bytes = fs::read(artifact).with_context(|| format!("hashing {}", artifact.display()))?;
        let key = artifact
            .strip_prefix(&self.out_dir)
            .unwrap_or(artifact)
            .to_string_lossy()
            .replace('\\', "/");
        self.artifacts.insert(key, sha256_hex(&bytes));
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
