//! Output directory handling: an exclusive lock, hashed artifact records and
//! the run manifest.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
const LOCK: &str = ".lock";

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub artifact_version: String,
    pub config: RunConfig,
    /// SHA-256 of the command name and the effective configuration.
    pub input_hash: String,
    pub started: String,
    pub finished: String,
    pub status: String,
    pub exit_code: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub files: Vec<FileRecord>,
    pub summary: BTreeMap<String, serde_json::Value>,
}

/// Input hash of a run: the subcommand plus the configuration without its output path.
pub fn input_hash(command: &str, config: &RunConfig) -> String {
    let mut canonical = config.clone();
    canonical.out = None;
    let body = serde_json::to_string(&canonical).expect("configuration serializes");
    sha256_hex(format!("{command}\n{body}").as_bytes())
}

/// An output directory held for the duration of a run.
pub struct OutputDir {
    root: PathBuf,
    files: Vec<FileRecord>,
}

impl OutputDir {
    /// Creates the directory and takes its lock; fails if another run holds it.
    pub fn open(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root)
            .map_err(|e| CliError::config(format!("cannot create output directory {}: {e}", root.display())))?;
        let lock = root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(CliError::config(format!(
                    "output directory {} is locked by another run (remove {} if stale)",
                    root.display(),
                    lock.display()
                )));
            }
            Err(e) => return Err(CliError::config(format!("cannot lock {}: {e}", root.display()))),
        }
        Ok(OutputDir { root: root.to_path_buf(), files: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes an artifact and records its hash.
    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), CliError> {
        let path = self.root.join(name);
        let mut f = File::create(&path)
            .map_err(|e| CliError::numeric(format!("cannot write {}: {e}", path.display())))?;
        f.write_all(contents)
            .map_err(|e| CliError::numeric(format!("cannot write {}: {e}", path.display())))?;
        self.files.retain(|r| r.path != name);
        self.files.push(FileRecord {
            path: name.to_string(),
            bytes: contents.len() as u64,
            sha256: sha256_hex(contents),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::numeric(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn files(&self) -> &[FileRecord] {
        &self.files
    }

    pub fn finish(&mut self, manifest: &RunManifest) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(manifest).map_err(|e| CliError::numeric(e.to_string()))?;
        text.push('\n');
        fs::write(self.root.join(MANIFEST), text)
            .map_err(|e| CliError::numeric(format!("cannot write manifest: {e}")))
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let first = OutputDir::open(dir.path()).unwrap();
        assert!(OutputDir::open(dir.path()).is_err());
        drop(first);
        let mut again = OutputDir::open(dir.path()).unwrap();
        again.write("a.txt", b"hello").unwrap();
        again.write("a.txt", b"hello!").unwrap();
        assert_eq!(again.files().len(), 1);
        assert_eq!(again.files()[0].bytes, 6);
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
