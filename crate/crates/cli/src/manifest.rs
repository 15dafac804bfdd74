//! Run directories: lock file, content hashes and the invocation manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".pgst.lock";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Record of one invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub wall_time_s: f64,
}

/// Held for the lifetime of a command; removes the lock file on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!("run directory {} is locked by another invocation ({})", dir.display(), path.display())
            }
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Files under `path` (or `path` itself), sorted, skipping run bookkeeping.
pub fn list_files(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in WalkDir::new(path).sort_by_file_name() {
        let entry = entry.with_context(|| format!("listing {}", path.display()))?;
        let name = entry.file_name().to_str().unwrap_or("");
        if entry.file_type().is_dir() || name == MANIFEST_FILE || name == LOCK_FILE || name.ends_with(".tmp") {
            continue;
        }
        out.push(entry.into_path());
    }
    out.sort();
    Ok(out)
}

pub fn hash_paths(paths: &[PathBuf]) -> Result<Vec<FileHash>> {
    let mut out = Vec::new();
    for root in paths {
        for f in list_files(root)? {
            out.push(FileHash { path: f.display().to_string(), sha256: sha256_file(&f)? });
        }
    }
    Ok(out)
}

/// Writes `bytes` via a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming {}", tmp.display()))?;
    Ok(())
}

/// Tracks one invocation from start to finish.
pub struct Run {
    pub dir: PathBuf,
    command: String,
    inputs: Vec<PathBuf>,
    input_hashes: Vec<FileHash>,
    outputs: Vec<PathBuf>,
    started: Instant,
    _lock: RunLock,
}

impl Run {
    pub fn start(dir: &Path, command: &str, inputs: Vec<PathBuf>) -> Result<Self> {
        let lock = RunLock::acquire(dir)?;
        let input_hashes = hash_paths(&inputs)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            inputs,
            input_hashes,
            outputs: Vec::new(),
            started: Instant::now(),
            _lock: lock,
        })
    }

    /// Path of an output file inside the run directory, recorded for the manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.outputs.push(p.clone());
        p
    }

    /// Records an output that lives outside the run directory layout rules.
    pub fn record_output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    /// Checks inputs are untouched and appends this invocation to the manifest.
    pub fn finish(self, config: serde_json::Value, seed: Option<u64>) -> Result<RunManifest> {
        let after = hash_paths(&self.inputs)?;
        if after != self.input_hashes {
            bail!("input files changed during {}", self.command);
        }
        let manifest = RunManifest {
            command: self.command.clone(),
            argv: std::env::args().collect(),
            config,
            seed,
            deterministic: crate::experiment::deterministic(),
            inputs: self.input_hashes.clone(),
            outputs: hash_paths(&self.outputs)?,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        let path = self.dir.join(MANIFEST_FILE);
        let mut all: Vec<RunManifest> = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            Err(_) => Vec::new(),
        };
        all.push(manifest.clone());
        write_atomic(&path, serde_json::to_string_pretty(&all)?.as_bytes())?;
        Ok(manifest)
    }
}
