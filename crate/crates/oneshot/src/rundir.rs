//! Run directories with a single-writer lock.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, IoContext, Result};

/// Overrides the configured output root when set.
pub const OUTPUT_ROOT_ENV: &str = "ONESHOT_OUTPUT_ROOT";
const LOCK: &str = ".lock";
pub const CONFIG_SNAPSHOT: &str = "config.snapshot.toml";

pub fn output_root(configured: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => configured.to_path_buf(),
    }
}

/// `{config.snapshot, checkpoints/, datasets/, reports/, logs/}` under one root.
/// Holds the directory's lock until dropped.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn open(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "datasets", "reports", "logs"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).at(&p)?;
        }
        let lock = root.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(Self {
                root: root.to_path_buf(),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Persistence(format!(
                "{} is locked by another writer (remove {} if no run is active)",
                root.display(),
                lock.display()
            ))),
            Err(e) => Err(e).at(&lock),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn datasets(&self) -> PathBuf {
        self.root.join("datasets")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn write_snapshot(&self, text: &str) -> Result<()> {
        let p = self.root.join(CONFIG_SNAPSHOT);
        fs::write(&p, text).at(&p)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_lock() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::open(dir.path()).unwrap();
        for sub in ["checkpoints", "datasets", "reports", "logs"] {
            assert!(dir.path().join(sub).is_dir());
        }
        assert!(matches!(RunDir::open(dir.path()), Err(Error::Persistence(_))));
        drop(run);
        RunDir::open(dir.path()).unwrap();
    }
}
