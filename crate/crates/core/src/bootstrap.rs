//! The bootstrap seed: pinned host binaries imported into the store once,
//! giving generic builds a shell and a handful of core tools.

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use crate::store::{io_err, Store, StoreError, StorePath};

/// Store item name of the seed.
pub const SEED_NAME: &str = "bootstrap-seed";
/// GC root keeping the seed alive.
pub const SEED_ROOT: &str = "bootstrap-seed";

/// The shell is mandatory; the others are copied when the host has them.
const REQUIRED: &[&str] = &["sh"];
const OPTIONAL: &[&str] = &[
    "cat", "mkdir", "cp", "chmod", "ln", "rm", "head", "ls", "touch", "mv", "tr", "sed", "echo", "env", "printf",
];
const HOST_DIRS: &[&str] = &["/bin", "/usr/bin"];

fn find_tool(name: &str) -> Option<PathBuf> {
    HOST_DIRS
        .iter()
        .map(|d| Path::new(d).join(name))
        .find(|p| fs::metadata(p).is_ok_and(|m| m.is_file()))
}

fn pin_file(store: &Store) -> PathBuf {
    store.config().state_dir().join(SEED_NAME)
}

/// The recorded seed path, if the store has one that is still valid.
pub fn current_seed(store: &Store) -> Result<Option<StorePath>, StoreError> {
    let Ok(text) = fs::read_to_string(pin_file(store)) else {
        return Ok(None);
    };
    let Ok(path) = store.config().parse_rendered(text.trim()) else {
        return Ok(None);
    };
    Ok(store.is_valid(&path)?.then_some(path))
}

/// Returns the store's seed, importing host tools on first use.
pub fn ensure_seed(store: &Store) -> Result<StorePath, StoreError> {
    if let Some(path) = current_seed(store)? {
        return Ok(path);
    }
    let tmp = tempfile::tempdir().map_err(io_err(Path::new("bootstrap")))?;
    let root = tmp.path().join("seed");
    let bin = root.join("bin");
    fs::create_dir_all(&bin).map_err(io_err(&bin))?;
    for (name, required) in REQUIRED.iter().map(|n| (n, true)).chain(OPTIONAL.iter().map(|n| (n, false))) {
        match find_tool(name) {
            Some(src) => {
                let dest = bin.join(name);
                fs::copy(&src, &dest).map_err(io_err(&src))?;
                fs::set_permissions(&dest, fs::Permissions::from_mode(0o755)).map_err(io_err(&dest))?;
            }
            None if required => {
                return Err(StoreError::InvalidConfig(format!(
                    "bootstrap tool `{name}` not found in {}",
                    HOST_DIRS.join(", ")
                )))
            }
            None => {}
        }
    }
    let path = store.add_content(&root, SEED_NAME)?;
    store.remove_gc_root(SEED_ROOT)?;
    store.put_root(SEED_ROOT, &store.render(&path))?;
    let pin = pin_file(store);
    fs::write(&pin, format!("{}\n", store.render(&path))).map_err(io_err(&pin))?;
    Ok(path)
}
