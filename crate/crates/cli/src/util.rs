//! Small shared helpers for the commands.

use std::path::Path;

/// Writes via a temp file in the same directory, then renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| anyhow::anyhow!("bad output path {}", path.display()))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a volume from `.vvol` or `.nii` by extension, normalized to [0, 1]
/// for registration use.
pub fn load_volume_normalized(path: &Path) -> anyhow::Result<metreg_core::Volume> {
    Ok(load_volume_raw(path)?.normalized())
}

pub fn load_volume_raw(path: &Path) -> anyhow::Result<metreg_core::Volume> {
    let obj = if path.extension().is_some_and(|e| e == "nii") {
        metreg_core::io::import_nifti(path)?
    } else {
        metreg_core::io::load_native(path)?
    };
    Ok(obj.into_volume()?)
}

pub fn load_mask(path: &Path) -> anyhow::Result<metreg_core::SegMask> {
    let obj = if path.extension().is_some_and(|e| e == "nii") {
        metreg_core::io::import_nifti(path)?
    } else {
        metreg_core::io::load_native(path)?
    };
    Ok(obj.into_mask()?)
}
