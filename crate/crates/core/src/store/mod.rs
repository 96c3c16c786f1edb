//! Content-addressed store.
//!
//! Items live at `<physicalRoot>/<digest>-<name>` and are identified by their
//! rendered logical form `<logicalRoot>/<digest>-<name>`. Validity and
//! references are tracked in a line-oriented database next to the store.

mod db;
mod gc;
mod path;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::os::unix::fs::symlink;
use std::path::{Path, PathBuf};

pub use db::ItemRecord;
pub use gc::{GcReport, GcRoot};
pub use path::{compute_store_digest, sha256_hex, validate_name, StorePath, DIGEST_BYTES, DIGEST_LEN};

use crate::archive::{self, ArchiveError};
use crate::canon;
use crate::lock::LockFile;

pub const DEFAULT_LOGICAL_ROOT: &str = "/hermit/store";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("invalid store item name `{0}`")]
    InvalidName(String),
    #[error("invalid store path `{0}`")]
    InvalidPath(String),
    #[error("`{0}` is not a valid store item")]
    NotValid(String),
    #[error("hash collision at {path}: registered content {existing}, new content {new}")]
    Collision {
        path: String,
        existing: String,
        new: String,
    },
    #[error("integrity error: {item} references missing item {missing}")]
    DanglingReference { item: String, missing: String },
    #[error("reference cycle among {0:?}")]
    ReferenceCycle(Vec<String>),
    #[error("GC root `{name}` already points at {existing}")]
    DuplicateRoot { name: String, existing: String },
    #[error("invalid GC root name `{0}`")]
    InvalidRootName(String),
    #[error("builds need the physical store root to equal the logical root (logical {logical}, physical {physical})")]
    BuildsNotPermitted { logical: String, physical: String },
    #[error("store database corrupt at line {line}: {reason}")]
    CorruptDb { line: usize, reason: String },
    #[error("invalid store configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where a store lives, logically and physically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreConfig {
    /// Root used inside hashes and item contents.
    pub logical_root: String,
    /// Directory holding the items on this machine.
    pub physical_root: PathBuf,
    pub db_path: PathBuf,
    pub roots_dir: PathBuf,
}

impl StoreConfig {
    pub fn new(
        logical_root: impl Into<String>,
        physical_root: impl Into<PathBuf>,
        db_path: impl Into<PathBuf>,
        roots_dir: impl Into<PathBuf>,
    ) -> Result<Self, StoreError> {
        let logical_root = logical_root.into();
        if !logical_root.starts_with('/') || logical_root.len() < 2 || logical_root.ends_with('/') {
            return Err(StoreError::InvalidConfig(format!(
                "logical root `{logical_root}` must be absolute without a trailing separator"
            )));
        }
        Ok(Self {
            logical_root,
            physical_root: physical_root.into(),
            db_path: db_path.into(),
            roots_dir: roots_dir.into(),
        })
    }

    /// Layout under a state directory with the store at `<logical_root>`
    /// and physical root equal to it.
    pub fn with_state_dir(logical_root: impl Into<String>, state_dir: &Path) -> Result<Self, StoreError> {
        let logical_root = logical_root.into();
        let physical = PathBuf::from(&logical_root);
        Self::new(
            logical_root,
            physical,
            state_dir.join("db").join("db"),
            state_dir.join("gcroots"),
        )
    }

    /// A self-contained store under `dir`: items in `dir/store`, metadata in
    /// `dir/state`. Used by tests and scratch stores.
    pub fn under(dir: &Path) -> Result<Self, StoreError> {
        let root = dir.join("store");
        let root = root
            .to_str()
            .ok_or_else(|| StoreError::InvalidConfig(format!("non-UTF-8 path {}", dir.display())))?;
        Self::with_state_dir(root, &dir.join("state"))
    }

    pub fn render(&self, path: &StorePath) -> String {
        format!("{}/{}", self.logical_root, path.base_name())
    }

    pub fn parse_rendered(&self, s: &str) -> Result<StorePath, StoreError> {
        let base = s
            .strip_prefix(self.logical_root.as_str())
            .and_then(|r| r.strip_prefix('/'))
            .ok_or_else(|| StoreError::InvalidPath(s.to_string()))?;
        StorePath::from_base_name(base)
    }

    pub fn physical_path(&self, path: &StorePath) -> PathBuf {
        self.physical_root.join(path.base_name())
    }

    pub fn builds_permitted(&self) -> bool {
        Path::new(&self.logical_root) == self.physical_root
    }

    pub fn logs_dir(&self) -> PathBuf {
        match self.physical_root.parent() {
            Some(parent) => parent.join("logs"),
            None => self.physical_root.join(".logs"),
        }
    }

    pub fn state_dir(&self) -> PathBuf {
        self.db_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    }

    fn lock_path(&self, path: &StorePath) -> PathBuf {
        self.physical_root.join(format!("{}.lock", path.base_name()))
    }

    fn db_lock_path(&self) -> PathBuf {
        suffixed(&self.db_path, ".lock")
    }

    fn gc_lock_path(&self) -> PathBuf {
        suffixed(&self.db_path, ".gc.lock")
    }
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Store path of a source item whose canonical archive is `archive_bytes`.
pub fn source_path(archive_bytes: &[u8], name: &str) -> Result<StorePath, StoreError> {
    validate_name(name)?;
    let content = sha256_hex(archive_bytes);
    StorePath::new(compute_store_digest(format!("source:{content}:{name}").as_bytes()), name)
}

/// Store path `add_text(name, contents)` will produce, computed without a store.
pub fn text_path(name: &str, contents: &[u8]) -> Result<StorePath, StoreError> {
    source_path(&archive::file_archive(contents, false), name)
}

/// A handle on a local store. Every operation takes the store's file locks,
/// so several handles (and processes) may share one store.
#[derive(Debug, Clone)]
pub struct Store {
    config: StoreConfig,
}

/// A temporary directory inside the physical root, removed on drop.
pub(crate) struct Staging {
    dir: PathBuf,
}

impl Staging {
    pub(crate) fn object(&self) -> PathBuf {
        self.dir.join("object")
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        let _ = remove_tree(&self.dir);
    }
}

impl Store {
    pub fn open(config: StoreConfig) -> Result<Self, StoreError> {
        for dir in [&config.physical_root, &config.roots_dir] {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let state = config.state_dir();
        fs::create_dir_all(&state).map_err(io_err(&state))?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn render(&self, path: &StorePath) -> String {
        self.config.render(path)
    }

    pub(crate) fn read_db(&self) -> Result<db::Db, StoreError> {
        let _lock = LockFile::shared(&self.config.db_lock_path()).map_err(io_err(&self.config.db_path))?;
        db::load(&self.config)
    }

    pub fn is_valid(&self, path: &StorePath) -> Result<bool, StoreError> {
        Ok(self.read_db()?.items.contains_key(path))
    }

    pub fn query(&self, path: &StorePath) -> Result<Option<ItemRecord>, StoreError> {
        Ok(self.read_db()?.items.remove(path))
    }

    /// Every valid item, in registration order.
    pub fn valid_items(&self) -> Result<Vec<ItemRecord>, StoreError> {
        let mut items: Vec<_> = self.read_db()?.items.into_values().collect();
        items.sort_by_key(|r| r.registered_at);
        Ok(items)
    }

    pub fn references(&self, path: &StorePath) -> Result<BTreeSet<StorePath>, StoreError> {
        self.query(path)?
            .map(|r| r.references)
            .ok_or_else(|| StoreError::NotValid(self.render(path)))
    }

    pub fn item_archive_bytes(&self, path: &StorePath) -> Result<Vec<u8>, StoreError> {
        Ok(archive::dump_path(&self.config.physical_path(path))?)
    }

    /// Recomputes the content digest of a valid item and compares it with the
    /// registered one.
    pub fn verify_item(&self, path: &StorePath) -> Result<bool, StoreError> {
        let rec = self
            .query(path)?
            .ok_or_else(|| StoreError::NotValid(self.render(path)))?;
        Ok(sha256_hex(&self.item_archive_bytes(path)?) == rec.content_digest)
    }

    /// Copies a file or directory tree into the store as a source item.
    pub fn add_content(&self, src: &Path, name: &str) -> Result<StorePath, StoreError> {
        validate_name(name)?;
        let staging = self.stage()?;
        copy_tree(src, &staging.object())?;
        self.add_staged(&staging, name)
    }

    /// Adds a single regular non-executable file.
    pub fn add_text(&self, name: &str, contents: &[u8]) -> Result<StorePath, StoreError> {
        validate_name(name)?;
        let staging = self.stage()?;
        let obj = staging.object();
        fs::write(&obj, contents).map_err(io_err(&obj))?;
        self.add_staged(&staging, name)
    }

    /// Adds a source item given as canonical archive bytes.
    pub fn add_archive(&self, name: &str, archive_bytes: &[u8]) -> Result<StorePath, StoreError> {
        validate_name(name)?;
        let staging = self.stage()?;
        archive::restore(archive_bytes, &staging.object())?;
        self.add_staged(&staging, name)
    }

    fn add_staged(&self, staging: &Staging, name: &str) -> Result<StorePath, StoreError> {
        let obj = staging.object();
        canon::canonicalize(&obj)?;
        let bytes = archive::dump_path(&obj)?;
        let content_digest = sha256_hex(&bytes);
        let path = source_path(&bytes, name)?;
        let _guard = self.gc_guard()?;
        let _lock = self.lock_item(&path)?;
        if let Some(existing) = self.query(&path)? {
            if existing.content_digest != content_digest {
                return Err(StoreError::Collision {
                    path: self.render(&path),
                    existing: existing.content_digest,
                    new: content_digest,
                });
            }
            return Ok(path);
        }
        self.install(&obj, &path)?;
        self.register(vec![ItemRecord {
            path: path.clone(),
            content_digest,
            references: BTreeSet::new(),
            deriver: None,
            registered_at: 0,
        }])?;
        Ok(path)
    }

    pub(crate) fn stage(&self) -> Result<Staging, StoreError> {
        let root = &self.config.physical_root;
        let dir = tempfile::Builder::new()
            .prefix(".tmp-")
            .tempdir_in(root)
            .map_err(io_err(root))?
            .keep();
        Ok(Staging { dir })
    }

    /// Moves a prepared object to the item's location, replacing any
    /// unregistered leftover there.
    pub(crate) fn install(&self, object: &Path, path: &StorePath) -> Result<(), StoreError> {
        let dest = self.config.physical_path(path);
        if fs::symlink_metadata(&dest).is_ok() {
            remove_tree(&dest).map_err(io_err(&dest))?;
        }
        fs::rename(object, &dest).map_err(io_err(&dest))
    }

    /// Appends records for items already present on disk. Every reference
    /// must be valid, in the same batch, or the item itself.
    pub(crate) fn register(&self, records: Vec<ItemRecord>) -> Result<(), StoreError> {
        let _lock = LockFile::exclusive(&self.config.db_lock_path()).map_err(io_err(&self.config.db_path))?;
        let current = db::load(&self.config)?;
        let batch: BTreeSet<&StorePath> = records.iter().map(|r| &r.path).collect();
        for rec in &records {
            for r in &rec.references {
                if !current.items.contains_key(r) && !batch.contains(r) {
                    return Err(StoreError::DanglingReference {
                        item: self.render(&rec.path),
                        missing: self.render(r),
                    });
                }
            }
            if let Some(existing) = current.items.get(&rec.path) {
                if existing.content_digest != rec.content_digest {
                    return Err(StoreError::Collision {
                        path: self.render(&rec.path),
                        existing: existing.content_digest.clone(),
                        new: rec.content_digest.clone(),
                    });
                }
            }
        }
        let fresh: Vec<ItemRecord> = records
            .into_iter()
            .filter(|r| !current.items.contains_key(&r.path))
            .collect();
        if fresh.is_empty() {
            return Ok(());
        }
        db::append(&self.config, &fresh)
    }

    pub(crate) fn lock_item(&self, path: &StorePath) -> Result<LockFile, StoreError> {
        let p = self.config.lock_path(path);
        LockFile::exclusive(&p).map_err(io_err(&p))
    }

    /// Held by operations that must not race a garbage collection.
    pub(crate) fn gc_guard(&self) -> Result<LockFile, StoreError> {
        let p = self.config.gc_lock_path();
        LockFile::shared(&p).map_err(io_err(&p))
    }

    /// Candidates whose digest occurs anywhere in the item's archive bytes.
    pub fn scan_references(
        &self,
        item: &StorePath,
        candidates: &BTreeSet<StorePath>,
    ) -> Result<BTreeSet<StorePath>, StoreError> {
        let bytes = self.item_archive_bytes(item)?;
        Ok(scan_bytes(&bytes, candidates))
    }

    /// Every item reachable from `roots`, dependencies first.
    pub fn closure(&self, roots: &[StorePath]) -> Result<Vec<StorePath>, StoreError> {
        let db = self.read_db()?;
        closure_in(&self.config, &db.items, roots)
    }

    pub fn add_gc_root(&self, name: &str, target: &StorePath) -> Result<PathBuf, StoreError> {
        if !self.is_valid(target)? {
            return Err(StoreError::NotValid(self.render(target)));
        }
        self.put_root(name, &self.render(target))
    }

    /// Roots every generation of the profile at `profile`.
    pub fn add_indirect_root(&self, profile: &Path) -> Result<PathBuf, StoreError> {
        let target = profile
            .to_str()
            .ok_or_else(|| StoreError::InvalidRootName(profile.display().to_string()))?;
        let name = format!("auto-{}", &sha256_hex(target.as_bytes())[..20]);
        self.put_root(&name, target)
    }

    pub(crate) fn put_root(&self, name: &str, target: &str) -> Result<PathBuf, StoreError> {
        if name.is_empty() || name.contains('/') || name.starts_with('.') {
            return Err(StoreError::InvalidRootName(name.to_string()));
        }
        let link = self.config.roots_dir.join(name);
        match fs::read_link(&link) {
            Ok(existing) if existing == Path::new(target) => return Ok(link),
            Ok(existing) => {
                return Err(StoreError::DuplicateRoot {
                    name: name.to_string(),
                    existing: existing.display().to_string(),
                })
            }
            Err(_) => {}
        }
        let tmp = self.config.roots_dir.join(format!(".{name}.{}", std::process::id()));
        let _ = fs::remove_file(&tmp);
        symlink(target, &tmp).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &link).map_err(io_err(&link))?;
        Ok(link)
    }

    pub fn remove_gc_root(&self, name: &str) -> Result<(), StoreError> {
        let link = self.config.roots_dir.join(name);
        match fs::remove_file(&link) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(io_err(&link)(e)),
        }
    }

    pub fn gc_roots(&self) -> Result<Vec<GcRoot>, StoreError> {
        gc::enumerate_roots(self)
    }

    pub fn collect_garbage(&self) -> Result<GcReport, StoreError> {
        gc::collect(self)
    }

    /// Deletes on-disk entries that never got registered (interrupted builds
    /// or imports). Returns how many were removed.
    pub fn discard_unregistered(&self) -> Result<usize, StoreError> {
        let _gc = LockFile::exclusive(&self.config.gc_lock_path()).map_err(io_err(&self.config.db_path))?;
        let db = self.read_db()?;
        gc::remove_strays(self, &db.items).map(|(n, _)| n)
    }
}

pub(crate) fn scan_bytes(bytes: &[u8], candidates: &BTreeSet<StorePath>) -> BTreeSet<StorePath> {
    let wanted: BTreeMap<&[u8], &StorePath> = candidates
        .iter()
        .map(|c| (c.digest().as_bytes(), c))
        .collect();
    let mut found = BTreeSet::new();
    if bytes.len() < DIGEST_LEN {
        return found;
    }
    for window in bytes.windows(DIGEST_LEN) {
        if let Some(p) = wanted.get(window) {
            found.insert((*p).clone());
            if found.len() == wanted.len() {
                break;
            }
        }
    }
    found
}

pub(crate) fn closure_in(
    config: &StoreConfig,
    items: &BTreeMap<StorePath, ItemRecord>,
    roots: &[StorePath],
) -> Result<Vec<StorePath>, StoreError> {
    let mut seen = BTreeSet::new();
    let mut stack: Vec<(StorePath, Option<StorePath>)> = Vec::new();
    for r in roots {
        if !items.contains_key(r) {
            return Err(StoreError::NotValid(config.render(r)));
        }
        stack.push((r.clone(), None));
    }
    while let Some((p, referrer)) = stack.pop() {
        if seen.contains(&p) {
            continue;
        }
        let Some(rec) = items.get(&p) else {
            return Err(StoreError::DanglingReference {
                item: referrer.map(|r| config.render(&r)).unwrap_or_default(),
                missing: config.render(&p),
            });
        };
        seen.insert(p.clone());
        for r in &rec.references {
            if !seen.contains(r) {
                stack.push((r.clone(), Some(p.clone())));
            }
        }
    }
    let mut pending: BTreeMap<&StorePath, usize> = BTreeMap::new();
    let mut dependents: BTreeMap<&StorePath, Vec<&StorePath>> = BTreeMap::new();
    for p in &seen {
        let deps: Vec<&StorePath> = items[p].references.iter().filter(|r| *r != p).collect();
        pending.insert(p, deps.len());
        for d in deps {
            dependents.entry(d).or_default().push(p);
        }
    }
    let mut ready: BTreeSet<&StorePath> = pending.iter().filter(|(_, n)| **n == 0).map(|(p, _)| *p).collect();
    let mut order = Vec::with_capacity(seen.len());
    while let Some(p) = ready.pop_first() {
        order.push(p.clone());
        for d in dependents.get(p).into_iter().flatten() {
            let n = pending.get_mut(d).expect("dependent is in closure");
            *n -= 1;
            if *n == 0 {
                ready.insert(d);
            }
        }
    }
    if order.len() != seen.len() {
        let stuck = pending
            .iter()
            .filter(|(_, n)| **n > 0)
            .map(|(p, _)| config.render(p))
            .collect();
        return Err(StoreError::ReferenceCycle(stuck));
    }
    Ok(order)
}

/// Copies a filesystem object, keeping permission bits and symlinks.
pub(crate) fn copy_tree(src: &Path, dst: &Path) -> Result<(), StoreError> {
    let meta = fs::symlink_metadata(src).map_err(io_err(src))?;
    let ft = meta.file_type();
    if ft.is_symlink() {
        let target = fs::read_link(src).map_err(io_err(src))?;
        symlink(target, dst).map_err(io_err(dst))?;
    } else if ft.is_file() {
        fs::copy(src, dst).map_err(io_err(dst))?;
    } else if ft.is_dir() {
        fs::create_dir(dst).map_err(io_err(dst))?;
        for entry in fs::read_dir(src).map_err(io_err(src))? {
            let entry = entry.map_err(io_err(src))?;
            copy_tree(&entry.path(), &dst.join(entry.file_name()))?;
        }
    } else {
        return Err(ArchiveError::SpecialFile(src.to_path_buf()).into());
    }
    Ok(())
}

/// Removes a tree even when canonicalization made it read-only.
pub fn remove_tree(path: &Path) -> io::Result<()> {
    use std::os::unix::fs::PermissionsExt;
    let meta = match fs::symlink_metadata(path) {
        Ok(m) => m,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e),
    };
    if meta.is_dir() {
        fs::set_permissions(path, fs::Permissions::from_mode(0o755))?;
        for entry in fs::read_dir(path)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                remove_tree(&entry.path())?;
            }
        }
        fs::remove_dir_all(path)
    } else {
        fs::remove_file(path)
    }
}

/// Total size of regular files and symlink targets under `path`.
pub(crate) fn tree_size(path: &Path) -> u64 {
    let Ok(meta) = fs::symlink_metadata(path) else {
        return 0;
    };
    if meta.is_dir() {
        fs::read_dir(path)
            .map(|rd| rd.flatten().map(|e| tree_size(&e.path())).sum())
            .unwrap_or(0)
    } else {
        meta.len()
    }
}
