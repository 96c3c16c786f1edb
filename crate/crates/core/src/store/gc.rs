use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use tracing::warn;

use super::{closure_in, db, io_err, remove_tree, tree_size, ItemRecord, Store, StoreError, StorePath};
use crate::lock::LockFile;

/// A GC root as found in the roots directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GcRoot {
    /// Entry name in the roots directory.
    pub name: String,
    /// Where the entry points (a rendered store path or a profile path).
    pub link: PathBuf,
    pub target: StorePath,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GcReport {
    pub deleted: Vec<StorePath>,
    pub freed_bytes: u64,
    /// Dead items left alone because another process held their lock.
    pub skipped: Vec<StorePath>,
}

/// Generation links of the profile whose current link is `profile`.
fn profile_links(profile: &Path) -> Vec<PathBuf> {
    let (Some(dir), Some(base)) = (profile.parent(), profile.file_name().and_then(|n| n.to_str())) else {
        return Vec::new();
    };
    let prefix = format!("{base}-");
    let Ok(entries) = fs::read_dir(dir) else {
        return Vec::new();
    };
    let mut links: Vec<PathBuf> = entries
        .flatten()
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let number = name.strip_prefix(&prefix)?.strip_suffix("-link")?;
            number.bytes().all(|b| b.is_ascii_digit()).then(|| e.path())
        })
        .collect();
    links.sort();
    links
}

/// Process owning a `temp-<pid>-<n>` root.
fn temp_root_owner(name: &str) -> Option<u32> {
    name.strip_prefix("temp-")?.split('-').next()?.parse().ok()
}

pub(super) fn enumerate_roots(store: &Store) -> Result<Vec<GcRoot>, StoreError> {
    let config = store.config();
    let dir = &config.roots_dir;
    let mut roots = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(roots),
        Err(e) => return Err(io_err(dir)(e)),
    };
    let mut entries: Vec<_> = entries.flatten().collect();
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let Ok(name) = entry.file_name().into_string() else {
            continue;
        };
        if name.starts_with('.') {
            continue;
        }
        if let Some(pid) = temp_root_owner(&name) {
            if !Path::new(&format!("/proc/{pid}")).exists() {
                warn!("removing temp root {name} of dead process {pid}");
                let _ = fs::remove_file(entry.path());
                continue;
            }
        }
        let Ok(link) = fs::read_link(entry.path()) else {
            continue;
        };
        let link_str = link.to_string_lossy().into_owned();
        if let Ok(target) = config.parse_rendered(&link_str) {
            roots.push(GcRoot { name, link, target });
            continue;
        }
        // Indirect root: a profile and all of its generation links.
        if fs::symlink_metadata(&link).is_err() && profile_links(&link).is_empty() {
            warn!("removing stale GC root {name} -> {}", link.display());
            let _ = fs::remove_file(entry.path());
            continue;
        }
        for gen_link in profile_links(&link) {
            let Ok(t) = fs::read_link(&gen_link) else { continue };
            if let Ok(target) = config.parse_rendered(&t.to_string_lossy()) {
                roots.push(GcRoot {
                    name: name.clone(),
                    link: gen_link,
                    target,
                });
            }
        }
    }
    Ok(roots)
}

pub(super) fn collect(store: &Store) -> Result<GcReport, StoreError> {
    let config = store.config();
    let _gc = LockFile::exclusive(&config.gc_lock_path()).map_err(io_err(&config.db_path))?;
    let _db = LockFile::exclusive(&config.db_lock_path()).map_err(io_err(&config.db_path))?;
    let items = db::load(config)?.items;

    let mut root_paths = Vec::new();
    for root in enumerate_roots(store)? {
        if items.contains_key(&root.target) {
            root_paths.push(root.target);
        } else {
            warn!("GC root {} points at invalid item {}", root.name, config.render(&root.target));
        }
    }
    let live: BTreeSet<StorePath> = closure_in(config, &items, &root_paths)?.into_iter().collect();

    let mut report = GcReport::default();
    let mut keep: Vec<&ItemRecord> = Vec::new();
    let mut ordered: Vec<&ItemRecord> = items.values().collect();
    ordered.sort_by_key(|r| r.registered_at);
    for rec in ordered {
        if live.contains(&rec.path) {
            keep.push(rec);
            continue;
        }
        let lock_path = config.lock_path(&rec.path);
        match LockFile::try_exclusive(&lock_path).map_err(io_err(&lock_path))? {
            None => {
                warn!("skipping {}: held by another process", config.render(&rec.path));
                report.skipped.push(rec.path.clone());
                keep.push(rec);
            }
            Some(_held) => {
                let physical = config.physical_path(&rec.path);
                report.freed_bytes += tree_size(&physical);
                remove_tree(&physical).map_err(io_err(&physical))?;
                let _ = fs::remove_file(&lock_path);
                report.deleted.push(rec.path.clone());
            }
        }
    }
    // Dead items must leave the database before anything else happens.
    db::rewrite(config, &keep)?;
    let survivors: BTreeMap<StorePath, ItemRecord> =
        keep.into_iter().map(|r| (r.path.clone(), r.clone())).collect();
    let (_, stray_bytes) = remove_strays(store, &survivors)?;
    report.freed_bytes += stray_bytes;
    report.deleted.sort();
    Ok(report)
}

/// Removes unregistered entries in the physical root that nobody is
/// building. Caller holds the exclusive GC lock.
pub(super) fn remove_strays(
    store: &Store,
    items: &BTreeMap<StorePath, ItemRecord>,
) -> Result<(usize, u64), StoreError> {
    let config = store.config();
    let root = &config.physical_root;
    let mut removed = 0;
    let mut bytes = 0;
    for entry in fs::read_dir(root).map_err(io_err(root))?.flatten() {
        let Ok(name) = entry.file_name().into_string() else {
            continue;
        };
        if name.starts_with('.') || name.ends_with(".lock") {
            continue;
        }
        let Ok(path) = StorePath::from_base_name(&name) else {
            continue;
        };
        if items.contains_key(&path) {
            continue;
        }
        let lock_path = config.lock_path(&path);
        if let Some(_held) = LockFile::try_exclusive(&lock_path).map_err(io_err(&lock_path))? {
            warn!("discarding unregistered store entry {name}");
            bytes += tree_size(&entry.path());
            remove_tree(&entry.path()).map_err(io_err(&entry.path()))?;
            let _ = fs::remove_file(&lock_path);
            removed += 1;
        }
    }
    Ok((removed, bytes))
}
