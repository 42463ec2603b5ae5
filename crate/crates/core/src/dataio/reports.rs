//! Report files and the output manifest. Every file is written to a
//! temporary sibling and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::arg(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub files: Vec<ManifestEntry>,
    /// Invariant or acceptance checks that failed during the run.
    pub failures: Vec<String>,
    pub warnings: Vec<String>,
}

/// Collects output files for one command invocation. Files are staged in
/// memory; `finish` checks the directory, writes each file atomically and
/// then the manifest.
#[derive(Debug)]
pub struct ReportSet {
    out_dir: PathBuf,
    manifest: Manifest,
    staged: Vec<(String, Vec<u8>)>,
    manifest_name: String,
}

impl ReportSet {
    pub fn new(out_dir: impl Into<PathBuf>, command: &str, config_hash: &str, seeds: Vec<u64>) -> Self {
        ReportSet {
            out_dir: out_dir.into(),
            manifest: Manifest {
                command: command.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                config_hash: config_hash.to_string(),
                seeds,
                files: Vec::new(),
                failures: Vec::new(),
                warnings: Vec::new(),
            },
            staged: Vec::new(),
            manifest_name: "manifest.json".to_string(),
        }
    }

    /// Writes the manifest under `name` instead of `manifest.json`.
    pub fn with_manifest_name(mut self, name: &str) -> Self {
        self.manifest_name = name.to_string();
        self
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn add(&mut self, file: &str, bytes: Vec<u8>) {
        self.staged.retain(|(f, _)| f != file);
        self.staged.push((file.to_string(), bytes));
    }

    pub fn add_json<T: Serialize>(&mut self, file: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Serialize(e.to_string()))?;
        bytes.push(b'\n');
        self.add(file, bytes);
        Ok(())
    }

    pub fn fail(&mut self, message: impl Into<String>) {
        self.manifest.failures.push(message.into());
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        self.manifest.warnings.push(message.into());
    }

    pub fn failures(&self) -> &[String] {
        &self.manifest.failures
    }

    pub fn finish(mut self) -> Result<Manifest> {
        fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        let probe = self.out_dir.join(".write-probe");
        fs::write(&probe, b"").map_err(|e| Error::io(&self.out_dir, e))?;
        let _ = fs::remove_file(&probe);
        for (file, bytes) in &self.staged {
            write_atomic(&self.out_dir.join(file), bytes)?;
            self.manifest.files.push(ManifestEntry {
                file: file.clone(),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(bytes),
            });
        }
        let mut bytes = serde_json::to_vec_pretty(&self.manifest).map_err(|e| Error::Serialize(e.to_string()))?;
        bytes.push(b'\n');
        write_atomic(&self.out_dir.join(&self.manifest_name), &bytes)?;
        Ok(self.manifest)
    }
}

/// CSV bytes from a header and rows of already-formatted fields.
pub fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Serialize(e.to_string()))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::Serialize(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Serialize(e.to_string()))
}

/// One JSON object per line.
pub fn jsonl_bytes<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Serialize(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}
