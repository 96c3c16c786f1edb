//! Realization of derivation graphs: cache lookups, builder runs,
//! canonicalization, reference scanning, registration and `--check`
//! rebuilds.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use tracing::{debug, info};

use crate::archive;
use crate::canon;
use crate::deriv::{Derivation, DerivationGraph};
use crate::sandbox::{execute_builder, Exit, Sandbox};
use crate::store::{compute_store_digest, sha256_hex, ItemRecord, Store, StoreError, StorePath};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BuildError {
    #[error("build of {path} failed: {reason} (log: {log}{})", build_dir.as_ref().map(|d| format!(", build directory kept at {d}")).unwrap_or_default())]
    Builder {
        path: String,
        reason: String,
        log: String,
        build_dir: Option<String>,
    },
    #[error("{path} not built: dependency {dependency} failed")]
    Dependency { path: String, dependency: String },
    #[error("non-deterministic build of {path}: first difference at {difference}")]
    NonDeterministic { path: String, difference: String },
    #[error("bad output for {path}: {message}")]
    Output { path: String, message: String },
    #[error("missing input {input} for {path}")]
    MissingInput { path: String, input: String },
    #[error("{0}")]
    Internal(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuildStatus {
    Built,
    Cached,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildResult {
    pub path: StorePath,
    pub status: BuildStatus,
    pub log: Vec<u8>,
    pub references: BTreeSet<StorePath>,
    pub error: Option<BuildError>,
}

impl BuildResult {
    fn failed(path: StorePath, log: Vec<u8>, error: BuildError) -> Self {
        Self {
            path,
            status: BuildStatus::Failed,
            log,
            references: BTreeSet::new(),
            error: Some(error),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RealizeOptions {
    /// Rebuild valid items and compare with the registered bits.
    pub check: bool,
    pub jobs: usize,
}

impl Default for RealizeOptions {
    fn default() -> Self {
        Self { check: false, jobs: 1 }
    }
}

/// Results of one realization, keyed by derivation digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Realization {
    pub root: String,
    pub results: BTreeMap<String, BuildResult>,
}

impl Realization {
    pub fn root_result(&self) -> &BuildResult {
        &self.results[&self.root]
    }

    /// The root's output path, or the first reason it is not available.
    pub fn output(&self) -> Result<StorePath, BuildError> {
        let r = self.root_result();
        match &r.error {
            Some(e) => Err(self.first_cause(e).clone()),
            None => Ok(r.path.clone()),
        }
    }

    /// Follows dependency failures to the derivation that actually failed.
    fn first_cause<'a>(&'a self, e: &'a BuildError) -> &'a BuildError {
        let mut err = e;
        for _ in 0..self.results.len() {
            let BuildError::Dependency { dependency, .. } = err else { break };
            match self
                .results
                .values()
                .find(|r| r.path.to_string() == *dependency || dependency.ends_with(&format!("/{}", r.path)))
                .and_then(|r| r.error.as_ref())
            {
                Some(next) => err = next,
                None => break,
            }
        }
        err
    }

    pub fn count(&self, status: BuildStatus) -> usize {
        self.results.values().filter(|r| r.status == status).count()
    }
}

type Slot = Arc<(Mutex<Option<BuildResult>>, Condvar)>;

/// Coalesces concurrent requests for the same derivation within a process
/// and counts builder runs.
#[derive(Default)]
pub struct BuildCoordinator {
    inflight: Mutex<HashMap<(String, bool), Slot>>,
    spawns: AtomicU64,
}

impl BuildCoordinator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of builder runs so far.
    pub fn spawns(&self) -> u64 {
        self.spawns.load(Ordering::SeqCst)
    }

    fn coalesce(&self, key: (String, bool), work: impl FnOnce() -> BuildResult) -> BuildResult {
        let (slot, leader) = {
            let mut map = self.inflight.lock().expect("coordinator lock");
            match map.get(&key) {
                Some(s) => (s.clone(), false),
                None => {
                    let s: Slot = Arc::new((Mutex::new(None), Condvar::new()));
                    map.insert(key.clone(), s.clone());
                    (s, true)
                }
            }
        };
        if !leader {
            let (lock, cv) = &*slot;
            let mut done = lock.lock().expect("slot lock");
            while done.is_none() {
                done = cv.wait(done).expect("slot lock");
            }
            return done.clone().expect("checked");
        }
        let result = work();
        let (lock, cv) = &*slot;
        *lock.lock().expect("slot lock") = Some(result.clone());
        cv.notify_all();
        self.inflight.lock().expect("coordinator lock").remove(&key);
        result
    }
}

struct Job<'a> {
    store: &'a Store,
    coordinator: &'a BuildCoordinator,
    graph: &'a DerivationGraph,
    check: bool,
}

impl Job<'_> {
    fn input_closure(&self, drv: &Derivation) -> Result<BTreeSet<StorePath>, StoreError> {
        let config = self.store.config();
        let mut roots = Vec::new();
        for p in drv.input_drvs.iter().map(|(_, p)| p).chain(&drv.input_srcs) {
            roots.push(config.parse_rendered(p)?);
        }
        Ok(self.store.closure(&roots)?.into_iter().collect())
    }

    fn write_log(&self, path: &StorePath, log: &[u8]) -> String {
        let dir = self.store.config().logs_dir();
        let file = dir.join(format!("{}.log", path.base_name()));
        if fs::create_dir_all(&dir).and_then(|_| fs::write(&file, log)).is_err() {
            debug!("could not write log {}", file.display());
        }
        file.display().to_string()
    }

    /// Runs the builder of `drv` so that its output lands at `target`.
    /// Returns the canonical archive bytes of the output.
    fn run(&self, drv: &Derivation, target: &StorePath, log: &mut Vec<u8>) -> Result<Vec<u8>, BuildError> {
        let config = self.store.config();
        let rendered = config.render(target);
        let physical = config.physical_path(target);
        crate::store::remove_tree(&physical).map_err(|e| BuildError::Internal(e.to_string()))?;
        let mut sandbox = Sandbox::new(drv, &physical).map_err(|e| BuildError::Internal(e.to_string()))?;
        sandbox.env.insert("out".into(), rendered.clone());
        self.coordinator.spawns.fetch_add(1, Ordering::SeqCst);
        info!("building {rendered}");
        let exit = execute_builder(drv, &mut sandbox);
        log.extend_from_slice(&sandbox.log);
        if let Exit::Failure(reason) = exit {
            let _ = crate::store::remove_tree(&physical);
            let build_dir = sandbox.build_dir.display().to_string();
            return Err(BuildError::Builder {
                path: rendered,
                reason,
                log: self.write_log(target, log),
                build_dir: Some(build_dir),
            });
        }
        sandbox.discard();
        let canonical = canon::canonicalize(&physical).and_then(|_| archive::dump_path(&physical));
        canonical.map_err(|e| {
            let _ = crate::store::remove_tree(&physical);
            BuildError::Output {
                path: rendered,
                message: e.to_string(),
            }
        })
    }

    fn build(&self, digest: &str, drv: &Derivation) -> BuildResult {
        let path = match drv.output_path() {
            Ok(p) => p,
            Err(e) => {
                let p = StorePath::new("0".repeat(32), "invalid").expect("valid placeholder");
                return BuildResult::failed(p, Vec::new(), BuildError::Internal(e.to_string()));
            }
        };
        match self.build_inner(digest, drv, &path) {
            Ok(r) => r,
            Err((log, e)) => BuildResult::failed(path, log, e),
        }
    }

    fn build_inner(
        &self,
        digest: &str,
        drv: &Derivation,
        path: &StorePath,
    ) -> Result<BuildResult, (Vec<u8>, BuildError)> {
        let internal = |e: StoreError| (Vec::new(), BuildError::Internal(e.to_string()));
        let cached = |rec: ItemRecord| BuildResult {
            path: path.clone(),
            status: BuildStatus::Cached,
            log: Vec::new(),
            references: rec.references,
            error: None,
        };
        if !self.check {
            if let Some(rec) = self.store.query(path).map_err(internal)? {
                return Ok(cached(rec));
            }
        }
        let _lock = self.store.lock_item(path).map_err(internal)?;
        let existing = self.store.query(path).map_err(internal)?;
        if let (Some(rec), false) = (&existing, self.check) {
            return Ok(cached(rec.clone()));
        }
        let candidates = self.input_closure(drv).map_err(internal)?;
        for (_, p) in &drv.input_drvs {
            let input = self.store.config().parse_rendered(p).map_err(internal)?;
            if !candidates.contains(&input) {
                return Err((
                    Vec::new(),
                    BuildError::MissingInput {
                        path: self.store.render(path),
                        input: p.clone(),
                    },
                ));
            }
        }
        let mut log = Vec::new();
        if let Some(rec) = existing {
            return self.check_item(drv, digest, path, rec, log);
        }
        self.store
            .add_text(&format!("{}.drv", drv.name), drv.serialize().as_bytes())
            .map_err(internal)?;
        let bytes = self.run(drv, path, &mut log).map_err(|e| (log.clone(), e))?;
        let mut refs = candidates;
        refs.insert(path.clone());
        let references = crate::store::scan_bytes(&bytes, &refs);
        let record = ItemRecord {
            path: path.clone(),
            content_digest: sha256_hex(&bytes),
            references: references.clone(),
            deriver: Some(digest.to_string()),
            registered_at: 0,
        };
        if let Err(e) = self.store.register(vec![record]) {
            let _ = crate::store::remove_tree(&self.store.config().physical_path(path));
            return Err((log, BuildError::Internal(e.to_string())));
        }
        self.write_log(path, &log);
        Ok(BuildResult {
            path: path.clone(),
            status: BuildStatus::Built,
            log,
            references,
            error: None,
        })
    }

    /// Rebuilds a valid item under a shadow name of the same length and
    /// compares the result with the registered bits.
    fn check_item(
        &self,
        drv: &Derivation,
        digest: &str,
        path: &StorePath,
        rec: ItemRecord,
        mut log: Vec<u8>,
    ) -> Result<BuildResult, (Vec<u8>, BuildError)> {
        let internal = |e: StoreError| (Vec::new(), BuildError::Internal(e.to_string()));
        let shadow = StorePath::new(compute_store_digest(format!("check:{digest}").as_bytes()), path.name())
            .map_err(internal)?;
        let _shadow_lock = self.store.lock_item(&shadow).map_err(internal)?;
        let result = self.run(drv, &shadow, &mut log);
        let _ = crate::store::remove_tree(&self.store.config().physical_path(&shadow));
        let mut rebuilt = result.map_err(|e| (log.clone(), e))?;
        replace_all(&mut rebuilt, shadow.digest().as_bytes(), path.digest().as_bytes());
        let registered = self.store.item_archive_bytes(path).map_err(internal)?;
        if rebuilt != registered {
            let difference = archive::first_difference(&registered, &rebuilt).unwrap_or_else(|| ".".into());
            return Err((
                log,
                BuildError::NonDeterministic {
                    path: self.store.render(path),
                    difference,
                },
            ));
        }
        Ok(BuildResult {
            path: path.clone(),
            status: BuildStatus::Built,
            log,
            references: rec.references,
            error: None,
        })
    }
}

fn replace_all(bytes: &mut [u8], from: &[u8], to: &[u8]) {
    debug_assert_eq!(from.len(), to.len());
    let mut i = 0;
    while i + from.len() <= bytes.len() {
        if &bytes[i..i + from.len()] == from {
            bytes[i..i + from.len()].copy_from_slice(to);
            i += from.len();
        } else {
            i += 1;
        }
    }
}

/// Builds every derivation of `graph` that is not yet valid, dependencies
/// first. Per-derivation failures are reported in the results; a failed
/// derivation fails all of its dependents without running them.
pub fn realize(
    store: &Store,
    coordinator: &BuildCoordinator,
    graph: &DerivationGraph,
    options: RealizeOptions,
) -> crate::Result<Realization> {
    let config = store.config();
    if !config.builds_permitted() {
        return Err(StoreError::BuildsNotPermitted {
            logical: config.logical_root.clone(),
            physical: config.physical_root.display().to_string(),
        }
        .into());
    }
    let order = graph.topological()?;
    let _guard = store.gc_guard()?;
    for (path, text) in &graph.sources {
        let added = store.add_text(path.name(), text)?;
        if added != *path {
            return Err(BuildError::Internal(format!("source {path} was stored as {added}")).into());
        }
    }
    for digest in &order {
        for src in &graph.nodes[digest].input_srcs {
            let p = config.parse_rendered(src)?;
            if !store.is_valid(&p)? {
                return Err(BuildError::MissingInput {
                    path: graph.nodes[digest].name.clone(),
                    input: src.clone(),
                }
                .into());
            }
        }
    }

    let job = Job {
        store,
        coordinator,
        graph,
        check: options.check,
    };
    let run_one = |digest: &str, results: &BTreeMap<String, BuildResult>| -> BuildResult {
        let drv = &job.graph.nodes[digest];
        for dep in job.graph.dependencies(digest) {
            if let Some(r) = results.get(&dep).filter(|r| r.status == BuildStatus::Failed) {
                let path = drv
                    .output_path()
                    .unwrap_or_else(|_| StorePath::new("0".repeat(32), "invalid").expect("placeholder"));
                let error = BuildError::Dependency {
                    path: store.render(&path),
                    dependency: store.render(&r.path),
                };
                return BuildResult::failed(path, Vec::new(), error);
            }
        }
        coordinator.coalesce((digest.to_string(), options.check), || job.build(digest, drv))
    };

    let mut results = BTreeMap::new();
    if options.jobs <= 1 {
        for digest in &order {
            let r = run_one(digest, &results);
            results.insert(digest.clone(), r);
        }
    } else {
        struct State {
            ready: VecDeque<String>,
            pending: HashMap<String, usize>,
            results: BTreeMap<String, BuildResult>,
        }
        let mut dependents: HashMap<String, Vec<String>> = HashMap::new();
        let mut pending = HashMap::new();
        for d in &order {
            let deps = graph.dependencies(d);
            pending.insert(d.clone(), deps.len());
            for dep in deps {
                dependents.entry(dep).or_default().push(d.clone());
            }
        }
        let ready = order.iter().filter(|d| pending[*d] == 0).cloned().collect();
        let state = Mutex::new(State {
            ready,
            pending,
            results: BTreeMap::new(),
        });
        let cv = Condvar::new();
        let total = order.len();
        std::thread::scope(|s| {
            for _ in 0..options.jobs.min(total.max(1)) {
                s.spawn(|| loop {
                    let (digest, snapshot) = {
                        let mut st = state.lock().expect("scheduler lock");
                        loop {
                            if st.results.len() == total {
                                return;
                            }
                            if let Some(d) = st.ready.pop_front() {
                                let deps: BTreeMap<String, BuildResult> = graph
                                    .dependencies(&d)
                                    .into_iter()
                                    .filter_map(|dep| st.results.get(&dep).map(|r| (dep, r.clone())))
                                    .collect();
                                break (d, deps);
                            }
                            st = cv.wait(st).expect("scheduler lock");
                        }
                    };
                    let r = run_one(&digest, &snapshot);
                    let mut st = state.lock().expect("scheduler lock");
                    st.results.insert(digest.clone(), r);
                    for dep in dependents.get(&digest).into_iter().flatten() {
                        let n = st.pending.get_mut(dep).expect("known");
                        *n -= 1;
                        if *n == 0 {
                            st.ready.push_back(dep.clone());
                        }
                    }
                    cv.notify_all();
                });
            }
        });
        results = state.into_inner().expect("scheduler lock").results;
    }
    Ok(Realization {
        root: graph.root.clone(),
        results,
    })
}
