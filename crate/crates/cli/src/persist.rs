//! Run manifests and atomic output writing.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

/// A file read by the run, with its content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Record of one run. `config_hash` covers the command, the resolved
/// configuration and the input file contents, nothing else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: f64,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<OutputFile>,
    pub config: RunConfig,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn config_hash(command: &str, cfg: &RunConfig, inputs: &[InputFile]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update(b"\0");
    h.update(cfg.to_toml()?.as_bytes());
    for i in inputs {
        h.update(b"\0");
        h.update(i.sha256.as_bytes());
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Output files held in memory until the command has succeeded.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    /// Adds a file; relative paths are resolved against the run directory.
    pub fn add(&mut self, path: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.files.push((path.into(), bytes));
    }

    /// Adds a file produced by a writer callback.
    pub fn write<F>(&mut self, path: impl Into<PathBuf>, f: F) -> Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> scorelab_core::Result<()>,
    {
        let path = path.into();
        let mut buf = Vec::new();
        f(&mut buf).with_context(|| format!("encoding {}", path.display()))?;
        self.add(path, buf);
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &Path> {
        self.files.iter().map(|(p, _)| p.as_path())
    }

    /// Writes every file and then the manifest into `dir`. Each file goes to a
    /// temporary sibling first and is renamed into place only once all of
    /// them have been written.
    pub fn commit(self, dir: &Path, mut manifest: RunManifest) -> Result<RunManifest> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut staged = Vec::with_capacity(self.files.len());
        for (rel, bytes) in &self.files {
            let path = if rel.is_absolute() { rel.clone() } else { dir.join(rel) };
            let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            let mut tmp = tempfile::Builder::new()
                .prefix(".scorelab-")
                .tempfile_in(parent)
                .with_context(|| format!("staging {}", path.display()))?;
            tmp.write_all(bytes)?;
            tmp.as_file().sync_all()?;
            manifest.outputs.push(OutputFile {
                path: rel.to_string_lossy().into_owned(),
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            });
            staged.push((tmp, path));
        }
        for (tmp, path) in staged {
            tmp.persist(&path).with_context(|| format!("writing {}", path.display()))?;
        }
        manifest.finished = now();
        let text = toml::to_string(&manifest).context("serializing manifest")?;
        let mut tmp = tempfile::Builder::new().prefix(".scorelab-").tempfile_in(dir)?;
        tmp.write_all(text.as_bytes())?;
        tmp.persist(dir.join("manifest.toml")).context("writing manifest")?;
        Ok(manifest)
    }
}
