//! Run manifests: what a command was asked to do and what it wrote.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the manifest's directory when inside it.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config: serde_json::Value,
    /// Hash over the canonical config JSON and the input file hashes.
    pub config_hash: String,
    pub inputs: Vec<Artifact>,
    pub artifacts: Vec<Artifact>,
    pub started_at: u64,
    pub finished_at: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_bytes(&bytes))
}

/// `serde_json` keeps map keys sorted, so serializing a `Value` is canonical.
pub fn config_hash(config: &serde_json::Value, inputs: &[Artifact]) -> String {
    let mut h = Sha256::new();
    h.update(config.to_string().as_bytes());
    for a in inputs {
        h.update(a.sha256.as_bytes());
    }
    hex::encode(h.finalize())
}

pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    inputs: Vec<Artifact>,
    dir: PathBuf,
    artifacts: Vec<PathBuf>,
    started_at: u64,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: serde_json::Value, dir: &Path) -> Self {
        Self {
            command: command.to_string(),
            config,
            inputs: Vec::new(),
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
            started_at: unix_now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(Artifact {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn run_id(&self) -> String {
        config_hash(&self.config, &self.inputs)[..12].to_string()
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.to_path_buf());
    }

    /// Hashes every artifact and writes `manifest.json` into the run directory.
    pub fn finish(self) -> Result<RunManifest> {
        let path = self.dir.join(MANIFEST_FILE);
        self.finish_at(&path)
    }

    pub fn finish_at(self, path: &Path) -> Result<RunManifest> {
        let artifacts = self
            .artifacts
            .iter()
            .map(|p| {
                let rel = p.strip_prefix(&self.dir).unwrap_or(p);
                Ok(Artifact {
                    path: rel.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let hash = config_hash(&self.config, &self.inputs);
        let manifest = RunManifest {
            run_id: hash[..12].to_string(),
            command: self.command,
            config: self.config,
            config_hash: hash,
            inputs: self.inputs,
            artifacts,
            started_at: self.started_at,
            finished_at: unix_now(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(manifest)
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
