//! Run directories: built under a hidden sibling and renamed into place
//! when the command succeeds.

use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{Context, Result};
use serde::Serialize;

use stablekd::Error;

pub struct RunDir {
    staging: PathBuf,
    target: PathBuf,
    overwrite: bool,
}

impl RunDir {
    pub fn create(target: &Path, overwrite: bool) -> Result<Self> {
        let occupied = match std::fs::read_dir(target) {
            Ok(mut entries) => entries.next().is_some(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => false,
            Err(e) if e.kind() == std::io::ErrorKind::NotADirectory => {
                return Err(Error::Config(format!("{} exists and is not a directory", target.display())).into())
            }
            Err(e) => return Err(e).with_context(|| format!("inspecting {}", target.display())),
        };
        if occupied && !overwrite {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --overwrite to replace it",
                target.display()
            ))
            .into());
        }
        let name = target
            .file_name()
            .ok_or_else(|| Error::Config(format!("output path {} has no final component", target.display())))?;
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let staging = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
        if staging.exists() {
            std::fs::remove_dir_all(&staging)?;
        }
        std::fs::create_dir(&staging).with_context(|| format!("creating {}", staging.display()))?;
        Ok(RunDir { staging, target: target.to_path_buf(), overwrite })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.staging.join(file)
    }

    pub fn write(&self, file: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(file);
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    pub fn write_json(&self, file: &str, value: &impl Serialize) -> Result<()> {
        self.write(file, serde_json::to_string_pretty(value)? + "\n")
    }

    /// Moves the finished directory to its final name.
    pub fn commit(self) -> Result<PathBuf> {
        if self.overwrite && self.target.exists() {
            std::fs::remove_dir_all(&self.target).with_context(|| format!("removing {}", self.target.display()))?;
        }
        std::fs::rename(&self.staging, &self.target)
            .with_context(|| format!("moving results to {}", self.target.display()))?;
        let target = self.target.clone();
        std::mem::forget(self);
        Ok(target)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.staging);
    }
}

/// `git describe` of the source tree this binary was built from, or
/// "unknown" when that tree is gone or not a repository.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["-C", env!("CARGO_MANIFEST_DIR"), "describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}
