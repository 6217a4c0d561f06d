//! Run manifests: file inventory with git-style content digests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

/// SHA-256 over `"blob <len>\0" + content`, hex encoded.
pub fn digest(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    format!("{:x}", h.finalize())
}

pub fn digest_file(path: &Path) -> Result<String> {
    Ok(digest(&fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Digest of the cell's `config.toml`.
    pub config_hash: String,
    pub seed: u64,
    pub w0: f64,
    pub started: u64,
    pub finished: u64,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    pub fn new(config_hash: String, seed: u64, w0: f64, started: u64) -> Self {
        RunManifest { config_hash, seed, w0, started, finished: started, files: Vec::new() }
    }

    /// Records (or refreshes) the entry for `rel` inside `dir`.
    pub fn record(&mut self, dir: &Path, rel: &str) -> Result<()> {
        let content = fs::read(dir.join(rel)).with_context(|| format!("reading {rel}"))?;
        let entry = FileEntry { path: rel.to_string(), bytes: content.len() as u64, digest: digest(&content) };
        match self.files.iter_mut().find(|f| f.path == rel) {
            Some(f) => *f = entry,
            None => self.files.push(entry),
        }
        Ok(())
    }

    pub fn entry(&self, rel: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.path == rel)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join(format!(".{MANIFEST}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(&tmp, dir.join(MANIFEST))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
    }

    /// Checks that every listed file exists with its recorded digest.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for f in &self.files {
            let path: PathBuf = dir.join(&f.path);
            if !path.exists() {
                bail!("{} is listed in the manifest but missing", f.path);
            }
            if digest_file(&path)? != f.digest {
                bail!("{} does not match its manifest digest", f.path);
            }
        }
        Ok(())
    }
}
