//! The store operations front ends rely on, implemented locally here and
//! remotely by the daemon client.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::archive::{self, ImportReport};
use crate::bootstrap;
use crate::build::{self, BuildCoordinator, Realization, RealizeOptions};
use crate::deriv::{CompileContext, DerivationGraph};
use crate::store::{GcReport, Store, StoreConfig, StorePath};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RootKind {
    /// `target` is a rendered store path.
    Direct,
    /// `target` is a profile; all of its generations are kept.
    Indirect,
    /// Kept until the handle (or daemon session) goes away.
    Temp,
}

impl RootKind {
    pub fn as_u8(self) -> u8 {
        match self {
            RootKind::Direct => 0,
            RootKind::Indirect => 1,
            RootKind::Temp => 2,
        }
    }

    pub fn from_u8(b: u8) -> Option<Self> {
        match b {
            0 => Some(RootKind::Direct),
            1 => Some(RootKind::Indirect),
            2 => Some(RootKind::Temp),
            _ => None,
        }
    }
}

pub trait StoreOps: Send + Sync {
    fn logical_root(&self) -> &str;
    fn physical_root(&self) -> &Path;
    /// The bootstrap seed every generic build depends on.
    fn bootstrap(&self) -> Result<StorePath>;
    fn add_content(&self, src: &Path, name: &str) -> Result<StorePath>;
    fn add_text(&self, name: &str, contents: &[u8]) -> Result<StorePath>;
    fn realize(&self, graph: &DerivationGraph, options: RealizeOptions) -> Result<Realization>;
    fn is_valid(&self, path: &StorePath) -> Result<bool>;
    fn references(&self, path: &StorePath) -> Result<BTreeSet<StorePath>>;
    fn closure(&self, roots: &[StorePath]) -> Result<Vec<StorePath>>;
    /// Registers a root and returns its name (temp roots get a generated one).
    fn add_root(&self, name: &str, target: &str, kind: RootKind) -> Result<String>;
    fn remove_root(&self, name: &str) -> Result<()>;
    fn collect_garbage(&self) -> Result<GcReport>;
    fn export(&self, roots: &[StorePath], sink: &mut dyn Write) -> Result<usize>;
    fn import(&self, source: &mut dyn Read) -> Result<ImportReport>;

    fn render(&self, path: &StorePath) -> String {
        format!("{}/{}", self.logical_root(), path.base_name())
    }

    fn parse_rendered(&self, s: &str) -> Result<StorePath> {
        let base = s
            .strip_prefix(self.logical_root())
            .and_then(|r| r.strip_prefix('/'))
            .ok_or_else(|| crate::store::StoreError::InvalidPath(s.to_string()))?;
        Ok(StorePath::from_base_name(base)?)
    }

    fn physical_path(&self, path: &StorePath) -> PathBuf {
        self.physical_root().join(path.base_name())
    }

    fn compile_context(&self, system: &str) -> Result<CompileContext> {
        Ok(CompileContext {
            logical_root: self.logical_root().to_string(),
            system: system.to_string(),
            bootstrap: self.bootstrap()?,
        })
    }
}

/// Direct use of a store in this process, with the same locking a daemon
/// uses.
pub struct LocalStore {
    store: Store,
    coordinator: Arc<BuildCoordinator>,
    temp_roots: Mutex<Vec<String>>,
    seed: Mutex<Option<StorePath>>,
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl LocalStore {
    pub fn open(config: StoreConfig) -> Result<Self> {
        Ok(Self::with_coordinator(Store::open(config)?, Arc::new(BuildCoordinator::new())))
    }

    pub fn with_coordinator(store: Store, coordinator: Arc<BuildCoordinator>) -> Self {
        Self {
            store,
            coordinator,
            temp_roots: Mutex::new(Vec::new()),
            seed: Mutex::new(None),
        }
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn coordinator(&self) -> &Arc<BuildCoordinator> {
        &self.coordinator
    }

    pub fn config(&self) -> &StoreConfig {
        self.store.config()
    }

    /// Drops every temp root this handle created.
    pub fn release_temp_roots(&self) {
        let names = std::mem::take(&mut *self.temp_roots.lock().expect("temp roots"));
        for n in names {
            let _ = self.store.remove_gc_root(&n);
        }
    }
}

impl Drop for LocalStore {
    fn drop(&mut self) {
        self.release_temp_roots();
    }
}

/// A root name unique to this process.
pub fn temp_root_name() -> String {
    format!(
        "temp-{}-{}",
        std::process::id(),
        TEMP_COUNTER.fetch_add(1, Ordering::SeqCst)
    )
}

impl StoreOps for LocalStore {
    fn logical_root(&self) -> &str {
        &self.config().logical_root
    }

    fn physical_root(&self) -> &Path {
        &self.config().physical_root
    }

    fn bootstrap(&self) -> Result<StorePath> {
        let mut seed = self.seed.lock().expect("seed");
        if let Some(s) = seed.as_ref() {
            return Ok(s.clone());
        }
        let s = bootstrap::ensure_seed(&self.store)?;
        *seed = Some(s.clone());
        Ok(s)
    }

    fn add_content(&self, src: &Path, name: &str) -> Result<StorePath> {
        Ok(self.store.add_content(src, name)?)
    }

    fn add_text(&self, name: &str, contents: &[u8]) -> Result<StorePath> {
        Ok(self.store.add_text(name, contents)?)
    }

    /// The root output is held by a temp root until this handle is dropped,
    /// so a concurrent GC cannot take it before the caller roots it.
    fn realize(&self, graph: &DerivationGraph, options: RealizeOptions) -> Result<Realization> {
        let r = build::realize(&self.store, &self.coordinator, graph, options)?;
        if let Ok(out) = r.output() {
            self.add_root("", &self.store.render(&out), RootKind::Temp)?;
        }
        Ok(r)
    }

    fn is_valid(&self, path: &StorePath) -> Result<bool> {
        Ok(self.store.is_valid(path)?)
    }

    fn references(&self, path: &StorePath) -> Result<BTreeSet<StorePath>> {
        Ok(self.store.references(path)?)
    }

    fn closure(&self, roots: &[StorePath]) -> Result<Vec<StorePath>> {
        Ok(self.store.closure(roots)?)
    }

    fn add_root(&self, name: &str, target: &str, kind: RootKind) -> Result<String> {
        match kind {
            RootKind::Direct => {
                let p = self.store.config().parse_rendered(target)?;
                self.store.add_gc_root(name, &p)?;
                Ok(name.to_string())
            }
            RootKind::Indirect => {
                let link = self.store.add_indirect_root(Path::new(target))?;
                Ok(link
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default())
            }
            RootKind::Temp => {
                let p = self.store.config().parse_rendered(target)?;
                let name = temp_root_name();
                self.store.add_gc_root(&name, &p)?;
                self.temp_roots.lock().expect("temp roots").push(name.clone());
                Ok(name)
            }
        }
    }

    fn remove_root(&self, name: &str) -> Result<()> {
        self.temp_roots.lock().expect("temp roots").retain(|n| n != name);
        Ok(self.store.remove_gc_root(name)?)
    }

    fn collect_garbage(&self) -> Result<GcReport> {
        Ok(self.store.collect_garbage()?)
    }

    fn export(&self, roots: &[StorePath], sink: &mut dyn Write) -> Result<usize> {
        archive::export_closure(&self.store, roots, sink)
    }

    fn import(&self, source: &mut dyn Read) -> Result<ImportReport> {
        archive::import_stream(&self.store, source)
    }
}
