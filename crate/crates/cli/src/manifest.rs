//! Run manifest: what was run, on which inputs, producing which outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything except `timestamp` is a function of the inputs, so two runs
/// on identical inputs produce manifests that differ only there.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub version: String,
    pub config_hashes: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub timestamp: String,
}

/// Output directory plus the manifest being accumulated for it.
pub struct Run {
    out_dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    pub fn new(out_dir: &Path, command: Vec<String>) -> Result<Self> {
        fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Run {
            out_dir: out_dir.to_path_buf(),
            manifest: RunManifest {
                command,
                version: env!("CARGO_PKG_VERSION").to_string(),
                config_hashes: BTreeMap::new(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                seeds: Vec::new(),
                timestamp: String::new(),
            },
        })
    }

    /// Reads an input file and records its digest.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.manifest.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn read_config(&mut self, path: &Path) -> Result<String> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        self.manifest.config_hashes.insert(path.display().to_string(), sha256_hex(text.as_bytes()));
        Ok(text)
    }

    pub fn record_config_hash(&mut self, name: &str, hash: String) {
        self.manifest.config_hashes.insert(name.to_string(), hash);
    }

    pub fn record_seed(&mut self, seed: u64) {
        self.manifest.seeds.push(seed);
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    pub fn finish(mut self) -> Result<()> {
        self.manifest.timestamp = chrono::Utc::now().to_rfc3339();
        let path = self.out_dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
