use std::fs::OpenOptions;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use crate::fail::CliError;

pub const LOCK_NAME: &str = ".envtts.lock";

/// Exclusive writer lock on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
        let path = dir.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(CliError::runtime(format!(
                "{} is locked by another writer (delete {} if no other envtts process is running)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::runtime(format!("{}: {e}", path.display()))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
