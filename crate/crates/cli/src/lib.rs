//! Subcommands of the `ropetp` binary, usable as a library by tests.

pub mod commands;
pub mod config;
pub mod gradcheck;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("check failed: {0}")]
    Failed(String),
    #[error(transparent)]
    Core(#[from] ropetp_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Core(ropetp_core::Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// Keeps freed training buffers in the heap instead of returning them to
/// the kernel after every step.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub config_hash: String,
    pub unix_time: u64,
    /// File name to SHA-256.
    pub files: BTreeMap<String, String>,
}

/// `manifest.json`: one entry per command that wrote into the directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub commands: BTreeMap<String, ManifestEntry>,
}

impl Manifest {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = Self::path(dir);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    /// Hashes `files` (relative to `dir`) and records them under `command`.
    pub fn record(dir: &Path, command: &str, config_hash: &str, files: &[&str]) -> CliResult<()> {
        let mut m = Self::load(dir)?;
        let hashes = files.iter().map(|f| Ok((f.to_string(), sha256_file(&dir.join(f))?))).collect::<CliResult<_>>()?;
        let unix_time = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        m.commands.insert(command.into(), ManifestEntry { config_hash: config_hash.into(), unix_time, files: hashes });
        let path = Self::path(dir);
        write_file(&path, serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n")
    }
}
