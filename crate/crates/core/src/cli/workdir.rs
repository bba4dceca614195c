//! Workdir layout:
//!
//! ```text
//! <workdir>/
//!   config.json   effective config of the latest command
//!   run.json      run manifest: per command, its input fingerprint and artifacts
//!   .lock         held while a command runs
//!   clusters/     cluster models (and the language tree)
//!   checkpoints/  seed and expert checkpoints
//!   manifests/    corpus snapshot, budget plan, expert manifests and sets
//!   reports/      evaluation JSON and report files
//! ```

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::sha256_hex;

pub const CLUSTERS: &str = "clusters";
pub const CHECKPOINTS: &str = "checkpoints";
pub const MANIFESTS: &str = "manifests";
pub const REPORTS: &str = "reports";

/// A file produced by a command, relative to the workdir.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub fingerprint: String,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub steps: BTreeMap<String, StepRecord>,
}

pub struct Workdir {
    root: PathBuf,
}

impl Workdir {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in [CLUSTERS, CHECKPOINTS, MANIFESTS, REPORTS] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("run.json")
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        let p = self.manifest_path();
        if !p.exists() {
            return Ok(RunManifest::default());
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn save_manifest(&self, m: &RunManifest) -> Result<()> {
        let p = self.manifest_path();
        let tmp = p.with_extension("json.tmp");
        let mut text = serde_json::to_string_pretty(m)?;
        text.push('\n');
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &p).map_err(|e| Error::io(&p, e))
    }

    pub fn record(
        &self,
        command: &str,
        fingerprint: String,
        artifacts: &[PathBuf],
    ) -> Result<StepRecord> {
        let artifacts = artifacts
            .iter()
            .map(|p| {
                let rel = p
                    .strip_prefix(&self.root)
                    .unwrap_or(p)
                    .to_string_lossy()
                    .replace('\\', "/");
                Ok(Artifact {
                    sha256: file_sha256(p)?,
                    path: rel,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let record = StepRecord {
            fingerprint,
            artifacts,
        };
        let mut m = self.manifest()?;
        m.steps.insert(command.to_string(), record.clone());
        self.save_manifest(&m)?;
        Ok(record)
    }

    /// `true` when `command` ran with this fingerprint and its artifacts are
    /// unchanged on disk.
    pub fn is_up_to_date(&self, command: &str, fingerprint: &str) -> Result<bool> {
        let m = self.manifest()?;
        let Some(rec) = m.steps.get(command) else {
            return Ok(false);
        };
        if rec.fingerprint != fingerprint {
            return Ok(false);
        }
        for a in &rec.artifacts {
            let p = self.root.join(&a.path);
            if !p.exists() || file_sha256(&p)? != a.sha256 {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Take the workdir lock; released when the guard drops.
    pub fn lock(&self) -> Result<LockGuard> {
        let path = self.root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

pub struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// SHA-256 of a file, or of every file below a directory in sorted order.
pub fn tree_sha256(path: &Path) -> Result<String> {
    if !path.is_dir() {
        return file_sha256(path);
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    let mut acc = String::new();
    for e in entries {
        acc.push_str(&e.file_name().unwrap_or_default().to_string_lossy());
        acc.push(':');
        acc.push_str(&tree_sha256(&e)?);
        acc.push('\n');
    }
    Ok(sha256_hex(acc.as_bytes()))
}
