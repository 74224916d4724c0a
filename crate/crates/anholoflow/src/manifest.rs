//! Run manifests: every CLI run records what it was asked to do and what
//! it produced, so results can be audited and merged later.
//!
//! The manifest is the last file a run writes (atomically), which makes
//! "manifest present" a completion marker: a directory without one is a
//! failed or interrupted run.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const MANIFEST_SCHEMA: u32 = 1;

/// One produced file with its checksum, path relative to the run dir.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    /// SHA-256 of the config file text the run was launched with.
    pub config_sha256: String,
    /// Unix seconds.
    pub started: u64,
    pub finished: u64,
    pub files: Vec<FileEntry>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn begin(command: &str, seed: u64, config_text: &str) -> RunManifest {
        RunManifest {
            schema: MANIFEST_SCHEMA,
            tool_version: crate::VERSION.to_string(),
            command: command.to_string(),
            seed,
            config_sha256: io::sha256_bytes(config_text.as_bytes()),
            started: unix_now(),
            finished: 0,
            files: Vec::new(),
        }
    }

    /// Checksum and record a produced file; `path` must live under `dir`.
    pub fn record(&mut self, dir: &Path, path: &Path) -> Result<()> {
        let rel = path
            .strip_prefix(dir)
            .map_err(|_| Error::Integrity(format!("{} is outside the run dir", path.display())))?;
        self.files.push(FileEntry {
            path: rel.to_string_lossy().into_owned(),
            sha256: io::sha256_file(path)?,
        });
        Ok(())
    }

    /// Stamp the end time and write `manifest.json` atomically.
    pub fn finish(mut self, dir: &Path) -> Result<()> {
        self.finished = unix_now();
        let text = serde_json::to_string_pretty(&self)
            .map_err(|e| Error::Integrity(format!("manifest serialize: {e}")))?;
        io::write_atomic(&dir.join(MANIFEST_NAME), format!("{text}\n").as_bytes())
    }
}

/// Read a run dir's manifest without verifying checksums.
pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Integrity(format!("cannot read {}: {e}", path.display())))?;
    let m: RunManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Integrity(format!("bad manifest {}: {e}", path.display())))?;
    if m.schema != MANIFEST_SCHEMA {
        return Err(Error::Integrity(format!(
            "manifest schema {} (expected {MANIFEST_SCHEMA}) in {}",
            m.schema,
            path.display()
        )));
    }
    Ok(m)
}

/// Re-hash every recorded file; returns the manifest if all match, the
/// list of offending paths otherwise.
pub fn verify_run(dir: &Path) -> Result<(RunManifest, Vec<PathBuf>)> {
    let m = read_manifest(dir)?;
    let mut bad = Vec::new();
    for entry in &m.files {
        let path = dir.join(&entry.path);
        match io::sha256_file(&path) {
            Ok(h) if h == entry.sha256 => {}
            _ => bad.push(path),
        }
    }
    Ok((m, bad))
}
