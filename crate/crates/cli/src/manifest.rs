use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Content hash in the style of git blobs: `sha256("blob <len>\0" ++ bytes)`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(blob_hash(&bytes))
}

#[derive(Clone, Debug, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub command: String,
    pub args: Vec<String>,
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<toml::Value>,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
}

impl Manifest {
    pub fn new(command: &str, seeds: Vec<u64>, config: Option<toml::Value>) -> Self {
        Self {
            tool: format!("sde {}", env!("CARGO_PKG_VERSION")),
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            seeds,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(FileEntry { path: path.display().to_string(), sha256: file_hash(path)? });
        Ok(())
    }

    /// Records files under `dir` by their path relative to it.
    pub fn outputs(&mut self, dir: &Path, files: &[PathBuf]) -> CliResult<()> {
        for f in files {
            let rel = f.strip_prefix(dir).unwrap_or(f);
            self.outputs.push(FileEntry { path: rel.display().to_string(), sha256: file_hash(f)? });
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join("manifest.toml");
        let text = toml::to_string(self).map_err(|e| CliError::Usage(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
