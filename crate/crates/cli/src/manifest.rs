use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

/// Everything needed to repeat a run: the argument vector, resolved
/// parameters and a checksum per output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub threads: usize,
    pub parameters: serde_json::Value,
    pub versions: BTreeMap<String, String>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<OutputEntry>,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Tracks files written into one output directory.
pub struct Run {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl Run {
    pub fn start(
        dir: &Path,
        command: &str,
        config: Option<&Path>,
        seed: u64,
        threads: usize,
    ) -> Result<Run> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut versions = BTreeMap::new();
        versions.insert("nlos".to_string(), env!("CARGO_PKG_VERSION").to_string());
        Ok(Run {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                argv: std::env::args().collect(),
                config: config.map(Path::to_path_buf),
                seed,
                threads,
                parameters: serde_json::Value::Null,
                versions,
                started_unix: unix_now(),
                finished_unix: 0.0,
                outputs: Vec::new(),
            },
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn record(&mut self, name: &str) -> Result<()> {
        let sha256 = sha256_file(&self.path(name))?;
        self.manifest.outputs.retain(|o| o.path != name);
        self.manifest.outputs.push(OutputEntry {
            path: name.to_string(),
            sha256,
        });
        Ok(())
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.finished_unix = unix_now();
        self.manifest.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let path = self.path(MANIFEST_NAME);
        nlos_core::io::write_json(&path, &self.manifest)?;
        Ok(self.manifest)
    }
}
