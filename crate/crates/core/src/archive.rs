//! Deterministic tar packing of directory trees.

use std::fs;
use std::io::{self, Read};
use std::os::unix::fs::PermissionsExt;
use std::path::Path;

fn walk(root: &Path, rel: &Path, out: &mut Vec<std::path::PathBuf>) -> io::Result<()> {
    let mut names: Vec<_> = fs::read_dir(root.join(rel))?
        .map(|e| e.map(|e| e.file_name()))
        .collect::<io::Result<_>>()?;
    names.sort();
    for name in names {
        let child = rel.join(&name);
        out.push(child.clone());
        let meta = fs::symlink_metadata(root.join(&child))?;
        if meta.is_dir() {
            walk(root, &child, out)?;
        }
    }
    Ok(())
}

/// Packs `dir` into a tar with sorted entries, zero mtimes and owners, and
/// modes normalized to 0755/0644, so equal trees give equal bytes.
pub fn pack_dir(dir: &Path) -> io::Result<Vec<u8>> {
    let mut builder = tar::Builder::new(Vec::new());
    append_tree(&mut builder, dir, Path::new(""))?;
    builder.into_inner()
}

fn header(kind: tar::EntryType, mode: u32, size: u64) -> tar::Header {
    let mut header = tar::Header::new_gnu();
    header.set_mtime(0);
    header.set_uid(0);
    header.set_gid(0);
    header.set_entry_type(kind);
    header.set_mode(mode);
    header.set_size(size);
    header
}

/// Appends an in-memory file with normalized metadata.
pub fn append_bytes<W: io::Write>(
    builder: &mut tar::Builder<W>,
    name: &Path,
    bytes: &[u8],
) -> io::Result<()> {
    let mut h = header(tar::EntryType::Regular, 0o644, bytes.len() as u64);
    builder.append_data(&mut h, name, bytes)
}

/// Appends the tree under `dir` with every entry prefixed by `prefix`.
pub fn append_tree<W: io::Write>(
    builder: &mut tar::Builder<W>,
    dir: &Path,
    prefix: &Path,
) -> io::Result<()> {
    let mut entries = Vec::new();
    walk(dir, Path::new(""), &mut entries)?;
    if !prefix.as_os_str().is_empty() {
        let mut h = header(tar::EntryType::Directory, 0o755, 0);
        builder.append_data(&mut h, prefix, io::empty())?;
    }
    for rel in entries {
        let path = dir.join(&rel);
        let name = prefix.join(&rel);
        let meta = fs::symlink_metadata(&path)?;
        if meta.file_type().is_symlink() {
            let mut h = header(tar::EntryType::Symlink, 0o777, 0);
            builder.append_link(&mut h, &name, fs::read_link(&path)?)?;
        } else if meta.is_dir() {
            let mut h = header(tar::EntryType::Directory, 0o755, 0);
            builder.append_data(&mut h, &name, io::empty())?;
        } else {
            let exec = meta.permissions().mode() & 0o111 != 0;
            let mut h = header(
                tar::EntryType::Regular,
                if exec { 0o755 } else { 0o644 },
                meta.len(),
            );
            builder.append_data(&mut h, &name, fs::File::open(&path)?)?;
        }
    }
    Ok(())
}

/// Unpacks a tar produced by [`pack_dir`] (or any well-formed tar) into
/// `dest`. Entries escaping `dest` are rejected by the tar crate.
pub fn unpack(bytes: &[u8], dest: &Path) -> io::Result<()> {
    fs::create_dir_all(dest)?;
    let mut archive = tar::Archive::new(bytes);
    archive.set_preserve_mtime(false);
    archive.unpack(dest)
}

/// Reads one regular file from a tar without unpacking it.
pub fn read_entry(bytes: &[u8], name: &str) -> io::Result<Option<Vec<u8>>> {
    let mut archive = tar::Archive::new(bytes);
    for entry in archive.entries()? {
        let mut entry = entry?;
        if entry.path()?.as_os_str() == name {
            let mut buf = Vec::new();
            entry.read_to_end(&mut buf)?;
            return Ok(Some(buf));
        }
    }
    Ok(None)
}
