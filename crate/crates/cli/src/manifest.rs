use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

/// Provenance record written next to every run's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: String,
    /// SHA-256 of the resolved config snapshot, hex encoded.
    pub config_hash: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub exit_status: i32,
}

pub fn hash_text(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")
    }

    pub fn read(dir: &Path) -> io::Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(io::Error::other)
    }

    /// True when the snapshot in `dir` still hashes to the recorded value.
    pub fn verify_snapshot(&self, dir: &Path) -> io::Result<bool> {
        let text = fs::read_to_string(dir.join(CONFIG_SNAPSHOT))?;
        Ok(hash_text(&text) == self.config_hash)
    }
}
