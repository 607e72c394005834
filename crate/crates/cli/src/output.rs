//! Result directory: atomic file writes and the run manifest.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde_json::json;
use sha2::{Digest, Sha256};
use tempfile::NamedTempFile;

use crate::error::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `bytes` to `dir/name` through a temporary file in `dir` and a
/// rename, so readers never see a partial file.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(dir.join(name)).map_err(|e| CliError::Io(e.error))?;
    Ok(())
}

pub struct Output {
    dir: PathBuf,
    files: Vec<(String, String)>,
}

impl Output {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(
        &mut self,
        name: &str,
        fill: impl FnOnce(&mut Vec<u8>) -> Result<(), csv::Error>,
    ) -> Result<(), CliError> {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        write_atomic(&self.dir, name, &buf)?;
        self.files.push((name.to_string(), sha256_hex(&buf)));
        Ok(())
    }

    /// Everything not reproducible from the config (wallclock, threads)
    /// lives here rather than in the CSVs.
    pub fn manifest(&self, run: &ManifestInfo<'_>) -> Result<(), CliError> {
        let files: Vec<_> = self.files.iter().map(|(n, h)| json!({ "name": n, "sha256": h })).collect();
        let doc = json!({
            "command": run.command,
            "status": run.status,
            "config_path": run.config_path.map(|p| p.display().to_string()),
            "config_sha256": run.config_hash,
            "seed": run.seed,
            "threads": run.threads,
            "versions": {
                "rbsde": env!("CARGO_PKG_VERSION"),
                "scalar": "f64",
            },
            "wallclock_seconds": run.wallclock.as_secs_f64(),
            "files": files,
        });
        let mut text = serde_json::to_string_pretty(&doc).expect("manifest is valid JSON");
        text.push('\n');
        write_atomic(&self.dir, "manifest.json", text.as_bytes())
    }
}

pub struct ManifestInfo<'a> {
    pub command: &'a str,
    pub status: &'a str,
    pub config_path: Option<&'a Path>,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub threads: usize,
    pub wallclock: Duration,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        write_atomic(dir.path(), "a.csv", b"x\n1\n").unwrap();
        write_atomic(dir.path(), "a.csv", b"x\n2\n").unwrap();
        assert_eq!(std::fs::read(dir.path().join("a.csv")).unwrap(), b"x\n2\n");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
