//! Small filesystem helpers shared by the artifact modules.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{IoContext, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content digest of a file, or of a directory as the digest over its sorted
/// `(relative path, file digest)` listing. `None` when the path is absent.
pub fn digest_path(path: &Path) -> io::Result<Option<String>> {
    let meta = match fs::metadata(path) {
        Ok(m) => m,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e),
    };
    if meta.is_file() {
        return Ok(Some(sha256_hex(&fs::read(path)?)));
    }
    let mut entries = Vec::new();
    for entry in walkdir::WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(io::Error::other)?;
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(path).unwrap_or(entry.path());
            let digest = sha256_hex(&fs::read(entry.path())?);
            entries.push(format!("{}  {}\n", digest, rel.to_string_lossy()));
        }
    }
    Ok(Some(sha256_hex(entries.concat().as_bytes())))
}

/// Replace `path` with `bytes` via a sibling temp file and rename, so readers
/// see either the old or the new content.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).at(dir)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{}.tmp{}", name, std::process::id()));
    {
        let mut f = File::create(&tmp).at(&tmp)?;
        f.write_all(bytes).at(&tmp)?;
        f.sync_all().at(&tmp)?;
    }
    fs::rename(&tmp, path).at(path)?;
    Ok(())
}

pub fn append_line(path: &Path, line: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .at(path)?;
    writeln!(f, "{line}").at(path)?;
    Ok(())
}

/// Exclusive advisory lock on a lock file; released on drop.
#[derive(Debug)]
pub struct FileLock {
    file: File,
    path: PathBuf,
}

impl FileLock {
    pub fn acquire(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).at(dir)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .write(true)
            .open(path)
            .at(path)?;
        file.lock().at(path)?;
        Ok(FileLock {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for FileLock {
    fn drop(&mut self) {
        let _ = self.file.unlock();
    }
}

/// Workspace-relative path check: no absolute paths, no `..` components.
pub fn is_workspace_relative(path: &str) -> bool {
    let p = Path::new(path);
    !path.is_empty()
        && p.is_relative()
        && p.components().all(|c| {
            matches!(
                c,
                std::path::Component::Normal(_) | std::path::Component::CurDir
            )
        })
}

/// Single-quote `s` for `sh`.
pub fn shell_quote(s: &str) -> String {
    if !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b"@%+=:,./_-".contains(&b)) {
        return s.to_string();
    }
    format!("'{}'", s.replace('\'', "'\\''"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths() {
        assert!(is_workspace_relative("eval/config.toml"));
        assert!(is_workspace_relative("./eval"));
        assert!(!is_workspace_relative("/etc/passwd"));
        assert!(!is_workspace_relative("eval/../../x"));
        assert!(!is_workspace_relative(""));
    }

    #[test]
    fn directory_digest_tracks_contents() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("eval");
        fs::create_dir_all(&sub).unwrap();
        fs::write(sub.join("a.txt"), "1").unwrap();
        let before = digest_path(&sub).unwrap().unwrap();
        fs::write(sub.join("a.txt"), "2").unwrap();
        let after = digest_path(&sub).unwrap().unwrap();
        assert_ne!(before, after);
        assert_eq!(digest_path(&dir.path().join("missing")).unwrap(), None);
    }
}
