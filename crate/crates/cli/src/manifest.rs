//! Run manifests: what a command read, what it wrote, and with which
//! parameters. No timestamps, so reruns with the same inputs produce the
//! same manifest.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

pub const RUN_FILE: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub parameters: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

impl RunManifest {
    pub fn new(command: &str, parameters: serde_json::Value) -> Self {
        RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            parameters,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        self.inputs.push(hash_path(path)?);
        Ok(self)
    }

    pub fn output(&mut self, path: &Path) -> Result<&mut Self> {
        self.outputs.push(hash_path(path)?);
        Ok(self)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RUN_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_FILE);
        let raw = std::fs::read_to_string(&path).with_context(|| format!("expected run manifest at {}", path.display()))?;
        Ok(serde_json::from_str(&raw)?)
    }
}

/// SHA-256 of a file, or of the sorted `relative path, file hash` listing
/// of a directory (run manifests inside it excluded).
pub fn hash_path(path: &Path) -> Result<FileHash> {
    let sha256 = if path.is_dir() {
        let mut listing = String::new();
        for entry in WalkDir::new(path).sort_by_file_name() {
            let entry = entry?;
            if !entry.file_type().is_file() || entry.file_name() == RUN_FILE {
                continue;
            }
            let rel = entry.path().strip_prefix(path)?;
            listing.push_str(&format!("{}\0{}\n", rel.display(), sig_core::sha256_file(entry.path())?));
        }
        sig_core::sha256_hex(listing.as_bytes())
    } else {
        sig_core::sha256_file(path).with_context(|| format!("expected input at {}", path.display()))?
    };
    Ok(FileHash {
        path: path.to_path_buf(),
        sha256,
    })
}
