//! Run records: which files a command emitted and their content checksums.
//!
//! Checksums are git-style blob hashes over SHA-256,
//! `sha256("blob <len>\0" + content)`. Wall-clock fields are left out of the
//! hashed content: `timestamp` keys in JSON documents and the `seconds`
//! column of the training history.

use std::fs;
use std::path::{Path, PathBuf};

use cellfate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const PIPELINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub command: String,
    pub run_label: String,
    pub seed: u64,
    pub config_checksum: String,
    pub pipeline_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub artifacts: Vec<Artifact>,
}

impl RunRecord {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn checksum_of(&self, path: &str) -> Option<&str> {
        self.artifacts.iter().find(|a| a.path == path).map(|a| a.checksum.as_str())
    }
}

pub fn blob_checksum(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

fn strip_timestamps(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.remove("timestamp");
            map.values_mut().for_each(strip_timestamps);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_timestamps),
        _ => {}
    }
}

fn strip_seconds_column(text: &str) -> String {
    let mut lines = text.lines();
    let Some(header) = lines.next() else {
        return String::new();
    };
    let Some(col) = header.split(',').position(|h| h == "seconds") else {
        return text.to_string();
    };
    std::iter::once(header)
        .chain(lines)
        .map(|line| {
            line.split(',')
                .enumerate()
                .filter(|(i, _)| *i != col)
                .map(|(_, f)| f)
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Checksum of the file's content with wall-clock fields removed.
pub fn artifact_checksum(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let hashed = match ext {
        "json" => {
            let mut value: serde_json::Value = serde_json::from_slice(&bytes)?;
            strip_timestamps(&mut value);
            serde_json::to_vec(&value)?
        }
        "csv" if bytes.starts_with(b"epoch,") => strip_seconds_column(&String::from_utf8_lossy(&bytes)).into_bytes(),
        _ => bytes,
    };
    Ok(blob_checksum(&hashed))
}

/// Builds artifact entries for `files`, with paths relative to `root`.
pub fn artifacts(root: &Path, files: &[PathBuf]) -> Result<Vec<Artifact>> {
    files
        .iter()
        .map(|f| {
            let rel = f.strip_prefix(root).unwrap_or(f);
            let path = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            Ok(Artifact {
                path,
                checksum: artifact_checksum(f)?,
            })
        })
        .collect()
}
