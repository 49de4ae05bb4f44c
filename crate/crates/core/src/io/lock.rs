//! Exclusive output-directory lock: a `.lock` file created with
//! `create_new`, removed on drop.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const LOCK_NAME: &str = ".lock";

#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    /// Creates `dir` if needed and takes its lock. Fails if another writer
    /// holds it.
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_NAME);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::invalid(format!(
                    "{} is locked by another writer (remove {} if stale)",
                    dir.display(),
                    path.display()
                ))
            } else {
                Error::io(&path, e)
            }
        })?;
        writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
        Ok(DirLock { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_writer_is_refused() {
        let dir = std::env::temp_dir().join(format!("sceneflow-lock-{}", std::process::id()));
        let a = DirLock::acquire(&dir).unwrap();
        assert!(DirLock::acquire(&dir).unwrap_err().to_string().contains("locked"));
        drop(a);
        let b = DirLock::acquire(&dir).unwrap();
        drop(b);
        assert!(!dir.join(LOCK_NAME).exists());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
