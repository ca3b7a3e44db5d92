//! Output directories that appear only once a command has succeeded.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use stoneview::evaluation::write_json;

use crate::Outcome;

/// A directory staged as `.<name>.partial` next to its final location.
///
/// Dropping it without [`finish`] removes the staging directory, so a failed
/// command leaves nothing behind.
pub struct RunDir {
    staging: PathBuf,
    target: PathBuf,
    done: bool,
}

impl RunDir {
    pub fn create(target: &Path) -> Result<RunDir> {
        let name = target.file_name().context("output path has no final component")?.to_string_lossy();
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let staging = parent.join(format!(".{name}.partial"));
        if staging.exists() {
            fs::remove_dir_all(&staging).with_context(|| format!("clearing {}", staging.display()))?;
        }
        fs::create_dir_all(&staging).with_context(|| format!("creating {}", staging.display()))?;
        Ok(RunDir { staging, target: target.to_path_buf(), done: false })
    }

    pub fn path(&self) -> &Path {
        &self.staging
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if !self.done {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

#[derive(Serialize)]
struct Index<'a> {
    tag: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    created_unix: Option<u64>,
    artifacts: &'a [PathBuf],
    summary: &'a str,
}

/// Writes `index.json` listing the artifacts (relative to `dir`).
pub fn write_index(dir: &Path, tag: &str, det: bool, artifacts: &[PathBuf], summary: &str) -> Result<()> {
    let created_unix = (!det).then(|| {
        std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
    });
    write_json(&dir.join("index.json"), &Index { tag, created_unix, artifacts, summary })?;
    Ok(())
}

/// Writes the index and moves the staged directory into place, replacing an older one.
pub fn finish(mut dir: RunDir, tag: &str, det: bool, artifacts: Vec<PathBuf>, summary: String) -> Result<Outcome> {
    write_index(&dir.staging, tag, det, &artifacts, &summary)?;
    if dir.target.exists() {
        fs::remove_dir_all(&dir.target).with_context(|| format!("replacing {}", dir.target.display()))?;
    }
    fs::rename(&dir.staging, &dir.target)
        .with_context(|| format!("moving {} to {}", dir.staging.display(), dir.target.display()))?;
    dir.done = true;
    let artifacts = artifacts.into_iter().map(|a| dir.target.join(a)).collect();
    Ok(Outcome { artifacts, summary })
}
