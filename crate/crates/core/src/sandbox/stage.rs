use std::fs;
use std::io;
use std::os::unix::fs::symlink;
use std::path::Path;

use crate::catalog::{Mount, CONTAINER_ROOT};

/// Recursively copies `src` (file, directory or symlink) to `dst`,
/// preserving symlinks and permission bits.
pub(crate) fn copy_tree(src: &Path, dst: &Path) -> io::Result<()> {
    let meta = fs::symlink_metadata(src)?;
    if meta.file_type().is_symlink() {
        symlink(fs::read_link(src)?, dst)
    } else if meta.is_dir() {
        fs::create_dir_all(dst)?;
        for entry in fs::read_dir(src)? {
            let entry = entry?;
            copy_tree(&entry.path(), &dst.join(entry.file_name()))?;
        }
        Ok(())
    } else {
        if let Some(parent) = dst.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::copy(src, dst).map(|_| ())
    }
}

/// Path of a container target relative to the data root.
pub(crate) fn relative_target(target: &str) -> Option<&str> {
    let rest = target.strip_prefix(CONTAINER_ROOT)?.trim_start_matches('/');
    (!rest.is_empty() && !rest.split('/').any(|c| c == "..")).then(|| rest.trim_end_matches('/'))
}

/// Copies every read-only input into `data_root` at its container path and
/// creates the empty `output/` directory.
pub(crate) fn stage_inputs(mounts: &[Mount], data_root: &Path) -> io::Result<()> {
    fs::create_dir_all(data_root.join("output"))?;
    for m in mounts {
        let rel = relative_target(&m.target).ok_or_else(|| {
            io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("bad mount target {}", m.target),
            )
        })?;
        copy_tree(&m.source, &data_root.join(rel))?;
    }
    Ok(())
}
