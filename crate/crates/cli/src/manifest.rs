//! Atomic artifact writes and the out-dir manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{}.tmp{}", name, std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the out-dir, `/`-separated.
    pub path: String,
    pub sha256: String,
    /// Command line that produced the file.
    pub command: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    /// Most recent command line.
    pub command: String,
    pub config_hash: String,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn load(out: &Path) -> Result<Self> {
        let path = out.join(MANIFEST);
        match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| CliError::config(format!("{}: unreadable manifest: {}", path.display(), e))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Manifest::default()),
            Err(e) => Err(CliError::io(path, e)),
        }
    }

    /// Hashes `files` as they are on disk now and replaces their entries.
    pub fn record(out: &Path, command: &str, config_hash: &str, files: &[PathBuf]) -> Result<Manifest> {
        let mut m = Self::load(out)?;
        m.command = command.to_string();
        m.config_hash = config_hash.to_string();
        for f in files {
            let bytes = std::fs::read(f).map_err(|e| CliError::io(f, e))?;
            let rel = relative(out, f);
            m.files.retain(|e| e.path != rel);
            m.files.push(FileEntry {
                path: rel,
                sha256: sha256_hex(&bytes),
                command: command.to_string(),
                config_hash: config_hash.to_string(),
            });
        }
        m.files.sort_by(|a, b| a.path.cmp(&b.path));
        let mut text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        text.push('\n');
        write_atomic(&out.join(MANIFEST), text.as_bytes())?;
        Ok(m)
    }
}

fn relative(out: &Path, f: &Path) -> String {
    let rel = f.strip_prefix(out).unwrap_or(f);
    rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}
