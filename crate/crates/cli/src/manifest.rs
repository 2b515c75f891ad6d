//! Per-run manifest: config echo, seeds, version and SHA-256 of every file
//! read or written.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(CliError::io(format!("reading {}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, Serialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Seeds {
    pub train: u64,
    pub reconstruct: u64,
    pub sa: u64,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            config: config.clone(),
            seeds: Seeds { train: config.train.seed, reconstruct: config.reconstruct.seed, sa: config.sa.seed },
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(FileRecord { path: path.to_owned(), sha256: file_sha256(path)? });
        Ok(())
    }

    /// Write `bytes` to `path` and record its hash.
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        std::fs::write(path, bytes).map_err(CliError::io(format!("writing {}", path.display())))?;
        self.outputs.push(FileRecord { path: path.to_owned(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    /// Record a file some library call already wrote.
    pub fn output(&mut self, path: &Path) -> Result<(), CliError> {
        self.outputs.push(FileRecord { path: path.to_owned(), sha256: file_sha256(path)? });
        Ok(())
    }

    /// Save as `manifest_<command>.json` in `dir`.
    pub fn finish(self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(format!("manifest_{}.json", self.command));
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(CliError::io(format!("writing {}", path.display())))?;
        Ok(path)
    }
}
