//! Helpers shared by the `morf` binary and its tests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use morf_core::sandbox::pack_image;

/// Entrypoint of the reference image inside its rootfs.
pub const REFERENCE_ENTRYPOINT: &str = "/opt/morf/reference-image";

/// Packs the reference experiment binary into an image archive. A
/// `behavior` other than `None` makes the image misbehave on purpose.
pub fn reference_image(binary: &Path, behavior: Option<&str>) -> Result<Vec<u8>> {
    let rootfs = tempfile::tempdir().context("creating image staging dir")?;
    let target = rootfs
        .path()
        .join(REFERENCE_ENTRYPOINT.trim_start_matches('/'));
    fs::create_dir_all(target.parent().expect("entrypoint has a parent"))?;
    fs::copy(binary, &target).with_context(|| format!("copying {}", binary.display()))?;
    let mut entrypoint = vec![REFERENCE_ENTRYPOINT.to_string()];
    if let Some(b) = behavior {
        entrypoint.extend(["--behavior".to_string(), b.to_string()]);
    }
    Ok(pack_image(rootfs.path(), &entrypoint)?)
}

/// The reference binary installed next to the running executable.
pub fn sibling_reference_binary() -> Result<PathBuf> {
    let exe = std::env::current_exe()?;
    let path = exe
        .parent()
        .context("executable has no parent directory")?
        .join("morf-reference-image");
    anyhow::ensure!(
        path.is_file(),
        "reference image binary not found at {}",
        path.display()
    );
    Ok(path)
}

/// Prepends `fork_features(job = '<source>')` unless the script already forks.
pub fn fork_script(source: &str, script: &str) -> String {
    if script.contains("fork_features") {
        script.to_string()
    } else {
        format!("fork_features(job = '{source}')\n{script}")
    }
}
