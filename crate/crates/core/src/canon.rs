//! Canonicalization of build outputs and source items: timestamps pinned to
//! 1, write bits cleared, only the executable distinction kept.

use std::fs;
use std::os::unix::fs::{MetadataExt, PermissionsExt};
use std::path::Path;

use filetime::FileTime;

use crate::archive::ArchiveError;

/// Timestamp given to every canonical store entry.
pub const CANONICAL_MTIME: i64 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArchiveError + '_ {
    move |source| ArchiveError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn canonicalize(path: &Path) -> Result<(), ArchiveError> {
    let meta = fs::symlink_metadata(path).map_err(io_err(path))?;
    let ft = meta.file_type();
    if ft.is_symlink() {
        // symlinks are kept verbatim
    } else if ft.is_file() {
        if meta.nlink() > 1 {
            return Err(ArchiveError::HardLink(path.to_path_buf()));
        }
        let mode = if meta.permissions().mode() & 0o111 != 0 { 0o555 } else { 0o444 };
        fs::set_permissions(path, fs::Permissions::from_mode(mode)).map_err(io_err(path))?;
    } else if ft.is_dir() {
        if meta.permissions().mode() & 0o700 != 0o700 {
            fs::set_permissions(path, fs::Permissions::from_mode(0o755)).map_err(io_err(path))?;
        }
        for entry in fs::read_dir(path).map_err(io_err(path))? {
            let entry = entry.map_err(io_err(path))?;
            canonicalize(&entry.path())?;
        }
        fs::set_permissions(path, fs::Permissions::from_mode(0o555)).map_err(io_err(path))?;
    } else {
        return Err(ArchiveError::SpecialFile(path.to_path_buf()));
    }
    let t = FileTime::from_unix_time(CANONICAL_MTIME, 0);
    filetime::set_symlink_file_times(path, t, t).map_err(io_err(path))
}
