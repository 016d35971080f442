//! File-access log for dataset reads.
//!
//! Every loader opens files through [`open`], which records the canonical
//! path and refuses paths under a currently forbidden root. Adaptation
//! forbids the source-data root for its whole duration.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use crate::error::{Error, Result};

static READS: Mutex<Vec<PathBuf>> = Mutex::new(Vec::new());
static FORBIDDEN: Mutex<Vec<PathBuf>> = Mutex::new(Vec::new());

fn lock<T>(m: &'static Mutex<T>) -> MutexGuard<'static, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn canonical(path: &Path) -> PathBuf {
    path.canonicalize().unwrap_or_else(|_| path.to_path_buf())
}

/// Fails with [`Error::SourceAccess`] if `path` lies under a forbidden root.
pub fn check(path: &Path) -> Result<()> {
    let p = canonical(path);
    if lock(&FORBIDDEN).iter().any(|root| p.starts_with(root)) {
        return Err(Error::SourceAccess(p));
    }
    Ok(())
}

/// Opens a data file, recording the access.
pub fn open(path: &Path) -> Result<File> {
    check(path)?;
    let file = File::open(path).map_err(|e| Error::Data { path: path.into(), reason: e.to_string() })?;
    lock(&READS).push(canonical(path));
    Ok(file)
}

/// Reads a whole data file, recording the access.
pub fn read(path: &Path) -> Result<Vec<u8>> {
    use std::io::Read;
    let mut buf = Vec::new();
    open(path)?.read_to_end(&mut buf).map_err(|e| Error::Data { path: path.into(), reason: e.to_string() })?;
    Ok(buf)
}

/// Lists a directory, recording the access.
pub fn read_dir(path: &Path) -> Result<Vec<PathBuf>> {
    check(path)?;
    let entries = std::fs::read_dir(path).map_err(|e| Error::Data { path: path.into(), reason: e.to_string() })?;
    lock(&READS).push(canonical(path));
    let mut out: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    out.sort();
    Ok(out)
}

/// Number of recorded reads under `root`.
pub fn reads_under(root: &Path) -> usize {
    let root = canonical(root);
    lock(&READS).iter().filter(|p| p.starts_with(&root)).count()
}

pub fn total_reads() -> usize {
    lock(&READS).len()
}

/// Forbids reads under `root` until the guard is dropped.
pub fn forbid(root: &Path) -> ForbiddenRoot {
    let root = canonical(root);
    lock(&FORBIDDEN).push(root.clone());
    ForbiddenRoot { root }
}

#[must_use]
pub struct ForbiddenRoot {
    root: PathBuf,
}

impl Drop for ForbiddenRoot {
    fn drop(&mut self) {
        let mut f = lock(&FORBIDDEN);
        if let Some(pos) = f.iter().position(|r| *r == self.root) {
            f.remove(pos);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_are_recorded_and_forbidden_roots_refused() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.bin");
        std::fs::write(&f, b"x").unwrap();
        assert_eq!(reads_under(dir.path()), 0);
        read(&f).unwrap();
        assert_eq!(reads_under(dir.path()), 1);
        {
            let _g = forbid(dir.path());
            assert!(matches!(read(&f), Err(Error::SourceAccess(_))));
        }
        read(&f).unwrap();
        assert_eq!(reads_under(dir.path()), 2);
    }
}
