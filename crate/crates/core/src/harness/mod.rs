//! Experiment plumbing behind the `ddim` binary: configuration, file formats,
//! metrics, interpolation, plots and the named verification checks.

pub mod config;
pub mod experiments;
pub mod metrics;
pub mod plot;
pub mod slerp;
pub mod tensor_io;
pub mod verify;

use std::path::{Path, PathBuf};

use crate::error::Result;

/// Tracks files written into an output directory and deletes them on drop
/// unless [`OutputGuard::commit`] was called.
#[derive(Debug)]
pub struct OutputGuard {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<PathBuf>,
    committed: bool,
}

impl OutputGuard {
    pub fn new(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), created_dir, files: Vec::new(), committed: false })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Registers `name` inside the directory and returns its path.
    pub fn file(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        if !self.files.contains(&p) {
            self.files.push(p.clone());
        }
        p
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    pub fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.files)
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = std::fs::remove_file(f);
        }
        if self.created_dir {
            let _ = std::fs::remove_dir(&self.dir);
        }
    }
}
