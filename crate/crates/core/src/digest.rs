//! SHA-256 helpers shared by the registry, the catalog and the sandbox.

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Streams a file through SHA-256.
pub fn file_sha256(path: &Path) -> io::Result<String> {
    let mut file = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Digest of a directory tree: relative paths, entry types and file contents,
/// visited in sorted order. A missing root hashes like an empty tree.
pub fn tree_sha256(root: &Path) -> io::Result<String> {
    let mut hasher = Sha256::new();
    if root.exists() {
        hash_tree(root, root, &mut hasher)?;
    }
    Ok(hex::encode(hasher.finalize()))
}

fn hash_tree(root: &Path, dir: &Path, hasher: &mut Sha256) -> io::Result<()> {
    let meta = fs::symlink_metadata(dir)?;
    if meta.is_file() {
        hasher.update(b"F\0");
        hasher.update(file_sha256(dir)?.as_bytes());
        return Ok(());
    }
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        let rel = path.strip_prefix(root).unwrap_or(&path);
        let kind = entry.file_type()?;
        hasher.update(rel.to_string_lossy().as_bytes());
        if kind.is_symlink() {
            hasher.update(b"\0L\0");
            hasher.update(fs::read_link(&path)?.to_string_lossy().as_bytes());
        } else if kind.is_dir() {
            hasher.update(b"\0D\0");
            hash_tree(root, &path, hasher)?;
        } else {
            hasher.update(b"\0F\0");
            hasher.update(file_sha256(&path)?.as_bytes());
        }
        hasher.update(b"\n");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_digest() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn tree_digest_sees_new_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.csv"), "x").unwrap();
        let before = tree_sha256(dir.path()).unwrap();
        assert_eq!(before, tree_sha256(dir.path()).unwrap());
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/b"), "").unwrap();
        assert_ne!(before, tree_sha256(dir.path()).unwrap());
    }
}
