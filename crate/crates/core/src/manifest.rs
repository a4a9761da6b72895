//! Per-run provenance record, written atomically next to the artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{hex_digest, RunConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// Path to SHA-256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// Path to SHA-256 of every file written.
    pub outputs: BTreeMap<String, String>,
    pub versions: BTreeMap<String, String>,
    pub wall_clock_secs: f64,
    /// Command-specific summary values.
    pub summary: BTreeMap<String, serde_json::Value>,
}

pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    Ok(hex_digest(&bytes))
}

impl ManifestBuilder {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert(env!("CARGO_PKG_NAME").to_owned(), env!("CARGO_PKG_VERSION").to_owned());
        versions.insert("checkpoint_format".to_owned(), crate::model::checkpoint::VERSION.to_string());
        Self {
            manifest: RunManifest {
                command: command.to_owned(),
                config_hash: config.hash(),
                seed: config.seed,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                versions,
                wall_clock_secs: 0.0,
                summary: BTreeMap::new(),
            },
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let d = file_digest(path)?;
        self.manifest.inputs.insert(path.display().to_string(), d);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let d = file_digest(path)?;
        self.manifest.outputs.insert(path.display().to_string(), d);
        Ok(())
    }

    pub fn summary(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.manifest.summary.insert(key.to_owned(), serde_json::to_value(value)?);
        Ok(())
    }

    /// Stamps the wall clock and writes `manifest-<command>.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        let path = dir.join(format!("manifest-{}.json", self.manifest.command));
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::file(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_records_digests() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.txt");
        std::fs::write(&f, "abc").unwrap();
        let mut b = ManifestBuilder::new("probe", &RunConfig::default());
        b.input(&f).unwrap();
        b.summary("steps", 3).unwrap();
        let path = b.finish(dir.path()).unwrap();
        let m: RunManifest = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
        assert_eq!(
            m.inputs[&f.display().to_string()],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(m.summary["steps"], serde_json::json!(3));
        assert!(!dir.path().join("manifest-probe.json.tmp").exists());
    }
}
