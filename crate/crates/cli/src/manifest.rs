//! Provenance record written next to every artifact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use hyrec::index::sha256_hex;
use hyrec::model::write_atomic;
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub wall_seconds: f64,
}

/// Digests of a file, or of every file directly inside a directory.
fn digests(path: &Path) -> std::io::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != "manifest.json"))
            .collect();
        entries.sort();
        for p in entries {
            out.insert(p.display().to_string(), sha256_hex(&fs::read(&p)?));
        }
    } else if path.is_file() {
        out.insert(path.display().to_string(), sha256_hex(&fs::read(path)?));
    }
    Ok(out)
}

pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    started: Instant,
    started_unix: u64,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            inputs: Vec::new(),
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn input(mut self, path: &Path) -> Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    /// Hashes inputs and `outputs`, then writes the manifest atomically to
    /// `dest`.
    pub fn write(self, outputs: &[&Path], dest: &Path) -> std::io::Result<()> {
        let mut inputs = BTreeMap::new();
        for p in &self.inputs {
            inputs.extend(digests(p)?);
        }
        let mut outs = BTreeMap::new();
        for p in outputs {
            outs.extend(digests(p)?);
        }
        let m = RunManifest {
            command: self.command,
            config: self.config,
            seed: self.seed,
            inputs,
            outputs: outs,
            started_unix: self.started_unix,
            wall_seconds: self.started.elapsed().as_secs_f64(),
        };
        let bytes = serde_json::to_vec_pretty(&m).expect("manifest serializes");
        write_atomic(dest, &bytes)
    }
}

/// `<file>.manifest.json` for files, `<dir>/manifest.json` for directories.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    if artifact.is_dir() {
        artifact.join("manifest.json")
    } else {
        let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        artifact.with_file_name(name)
    }
}
