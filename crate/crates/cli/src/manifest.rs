//! Per-stage run manifests and input digests.

use nerfvs_core::io;
use nerfvs_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;
use walkdir::WalkDir;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub stage: String,
    pub config: serde_json::Value,
    /// Input name to SHA-256 digest.
    pub inputs: BTreeMap<String, String>,
    /// Output paths relative to the stage directory.
    pub outputs: Vec<String>,
    /// Wall-clock seconds per step.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    /// True if this manifest records a finished run of the same stage with
    /// the same config and inputs, and its outputs are still present.
    fn satisfies(&self, other: &RunManifest, dir: &Path) -> bool {
        self.tool_version == other.tool_version
            && self.stage == other.stage
            && self.config == other.config
            && self.inputs == other.inputs
            && self.outputs.iter().all(|o| dir.join(o).exists())
    }
}

/// SHA-256 of a file, or of a directory's sorted relative paths and file
/// contents. Manifests, `.partial` files and top-level entries named in
/// `exclude` are skipped.
pub fn digest(path: &Path, exclude: &[&str]) -> Result<String> {
    let io_err = |e: walkdir::Error| Error::Io {
        path: e.path().map_or_else(|| path.to_path_buf(), Path::to_path_buf),
        source: e.into(),
    };
    let mut hasher = Sha256::new();
    if path.is_file() {
        hasher.update(io::read_bytes(path)?);
        return Ok(hex::encode(hasher.finalize()));
    }
    if !path.exists() {
        return Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::ErrorKind::NotFound.into(),
        });
    }
    let walker = WalkDir::new(path).sort_by_file_name().into_iter().filter_entry(|e| {
        let top = e.depth() == 1 && exclude.iter().any(|x| e.file_name() == *x);
        !top
    });
    for entry in walker {
        let entry = entry.map_err(io_err)?;
        let name = entry.file_name().to_string_lossy();
        if !entry.file_type().is_file() || name == MANIFEST || name.ends_with(".partial") {
            continue;
        }
        let rel = entry.path().strip_prefix(path).unwrap_or(entry.path());
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0]);
        hasher.update(Sha256::digest(io::read_bytes(entry.path())?));
    }
    Ok(hex::encode(hasher.finalize()))
}

/// A named input and the top-level entries to ignore when digesting it.
pub struct Input<'a> {
    pub name: &'a str,
    pub path: PathBuf,
    pub exclude: &'a [&'a str],
}

impl<'a> Input<'a> {
    pub fn new(name: &'a str, path: impl Into<PathBuf>) -> Self {
        Self {
            name,
            path: path.into(),
            exclude: &[],
        }
    }
}

pub fn manifest_for(stage: &str, config: serde_json::Value, inputs: &[Input]) -> Result<RunManifest> {
    let mut digests = BTreeMap::new();
    for input in inputs {
        digests.insert(input.name.to_string(), digest(&input.path, input.exclude)?);
    }
    Ok(RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        stage: stage.to_string(),
        config,
        inputs: digests,
        outputs: Vec::new(),
        timings: BTreeMap::new(),
    })
}

/// Outcome of `run_stage`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

/// Runs `body` unless `dir` already holds a manifest for the same stage,
/// config and inputs. The old manifest is removed before running and the
/// new one is written last, so an interrupted stage leaves none behind.
/// `body` returns its output paths relative to `dir`.
pub fn run_stage(
    dir: &Path,
    manifest_name: &str,
    mut manifest: RunManifest,
    reuse: bool,
    body: impl FnOnce() -> Result<Vec<String>>,
) -> Result<(StageStatus, RunManifest)> {
    let path = dir.join(manifest_name);
    if reuse && path.exists() {
        if let Ok(old) = io::load_json::<RunManifest>(&path) {
            if old.satisfies(&manifest, dir) {
                return Ok((StageStatus::Skipped, old));
            }
        }
    }
    if path.exists() {
        std::fs::remove_file(&path).map_err(|source| Error::Io { path: path.clone(), source })?;
    }
    let start = Instant::now();
    manifest.outputs = body()?;
    manifest.timings.insert(manifest.stage.clone(), start.elapsed().as_secs_f64());
    io::save_json(&path, &manifest)?;
    Ok((StageStatus::Ran, manifest))
}
