//! Generational profiles: `<dir>/<name>-<N>-link` symlinks to union items
//! and a `<dir>/<name>` symlink naming the current one.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io;
use std::os::unix::fs::symlink;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus};
use std::sync::Arc;
use std::time::SystemTime;

use serde::Deserialize;

use crate::build::RealizeOptions;
use crate::deriv::{compile_union, UnionEntry};
use crate::lock::LockFile;
use crate::model::{Package, PackageRef, RecipeSet};
use crate::ops::{RootKind, StoreOps};
use crate::sandbox::UNION_MANIFEST;
use crate::store::StorePath;
use crate::Result;

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("nothing to roll back to")]
    NothingToRollBack,
    #[error("no generation {0}")]
    NoSuchGeneration(u64),
    #[error("cannot delete the current generation {0}")]
    DeleteCurrent(u64),
    #[error("`{0}` is not installed")]
    NotInstalled(String),
    #[error("`{0}` is listed twice")]
    Duplicate(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {message}", path.display())]
    BadManifest { path: PathBuf, message: String },
    #[error("generation {number} points at {target}, which is not a store item")]
    BadGeneration { number: u64, target: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ProfileError + '_ {
    move |source| ProfileError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Declarative profile contents.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<PackageRef>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    packages: Vec<String>,
}

impl Manifest {
    pub fn new(entries: Vec<PackageRef>) -> Self {
        Self { entries }
    }

    /// Parses `{"packages": ["name", "name@version", ...]}`.
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ProfileError> {
        let bad = |message: String| ProfileError::BadManifest {
            path: origin.to_path_buf(),
            message,
        };
        let doc: ManifestDoc = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        let entries = doc
            .packages
            .iter()
            .map(|s| s.parse::<PackageRef>().map_err(|e| bad(e.to_string())))
            .collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ProfileError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub number: u64,
    pub item: StorePath,
    /// What the generation holds, with exact versions.
    pub manifest: Manifest,
    /// Link modification time; display only.
    pub created_at: Option<SystemTime>,
    pub current: bool,
}

/// One search-path definition for a profile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchPath {
    pub variable: String,
    pub value: String,
    pub separator: String,
}

impl SearchPath {
    /// Bourne shell line that prepends the value to the variable.
    pub fn export_line(&self) -> String {
        let v = &self.variable;
        format!("export {v}=\"{}${{{v}:+{}}}${v}\"", self.value, self.separator)
    }
}

/// What a transaction needs besides the profile itself.
#[derive(Clone, Copy)]
pub struct Context<'a> {
    pub store: &'a dyn StoreOps,
    pub recipes: &'a RecipeSet,
    pub system: &'a str,
    pub options: RealizeOptions,
}

/// Union entries recorded in a union item.
pub fn union_entries(store: &dyn StoreOps, item: &StorePath) -> Result<Vec<UnionEntry>> {
    let file = store.physical_path(item).join(UNION_MANIFEST);
    let text = fs::read_to_string(&file).map_err(io_err(&file))?;
    Ok(serde_json::from_str(&text).map_err(|e| ProfileError::BadManifest {
        path: file,
        message: e.to_string(),
    })?)
}

/// Search-path definitions of a union item, one per variable, sorted by
/// variable name. A definition only appears when its directory exists.
pub fn item_search_paths(store: &dyn StoreOps, item: &StorePath) -> Result<Vec<SearchPath>> {
    let mut by_var: BTreeMap<String, (Vec<String>, String)> = BTreeMap::new();
    let rendered = store.render(item);
    let physical = store.physical_path(item);
    for entry in union_entries(store, item)? {
        for spec in entry.search_paths {
            let sub = spec.subdirectory.trim_end_matches('/');
            let dir = if sub.is_empty() || sub == "." {
                physical.clone()
            } else {
                physical.join(sub)
            };
            if !dir.is_dir() {
                continue;
            }
            let value = if sub.is_empty() || sub == "." {
                rendered.clone()
            } else {
                format!("{rendered}/{sub}")
            };
            let slot = by_var
                .entry(spec.variable.clone())
                .or_insert_with(|| (Vec::new(), spec.separator.clone()));
            if !slot.0.contains(&value) {
                slot.0.push(value);
            }
        }
    }
    Ok(by_var
        .into_iter()
        .map(|(variable, (values, separator))| SearchPath {
            variable,
            value: values.join(&separator),
            separator,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Profile {
    dir: PathBuf,
    name: String,
}

impl Profile {
    /// The profile whose current link is `path`.
    pub fn new(path: &Path) -> Result<Self, ProfileError> {
        let abs = std::path::absolute(path).map_err(io_err(path))?;
        let name = abs
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| ProfileError::BadManifest {
                path: abs.clone(),
                message: "profile path needs a file name".into(),
            })?
            .to_string();
        let dir = abs.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("/"));
        Ok(Self { dir, name })
    }

    /// `$HOME/.hermit-profile`.
    pub fn default_path() -> PathBuf {
        std::env::var_os("HOME")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("/"))
            .join(".hermit-profile")
    }

    pub fn path(&self) -> PathBuf {
        self.dir.join(&self.name)
    }

    fn link(&self, n: u64) -> PathBuf {
        self.dir.join(format!("{}-{n}-link", self.name))
    }

    fn lock(&self) -> Result<LockFile, ProfileError> {
        fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))?;
        let p = self.dir.join(format!("{}.lock", self.name));
        LockFile::exclusive(&p).map_err(io_err(&p))
    }

    fn numbers(&self) -> Result<Vec<u64>, ProfileError> {
        let prefix = format!("{}-", self.name);
        let entries = match fs::read_dir(&self.dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&self.dir)(e)),
        };
        let mut numbers: Vec<u64> = entries
            .flatten()
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_prefix(&prefix)?.strip_suffix("-link")?.parse().ok()
            })
            .collect();
        numbers.sort_unstable();
        Ok(numbers)
    }

    /// Number of the current generation.
    pub fn current_number(&self) -> Result<Option<u64>, ProfileError> {
        let target = match fs::read_link(self.path()) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&self.path())(e)),
        };
        let prefix = format!("{}-", self.name);
        Ok(target
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix(&prefix)?.strip_suffix("-link")?.parse().ok()))
    }

    fn generation(&self, store: &dyn StoreOps, n: u64, current: Option<u64>) -> Result<Generation> {
        let link = self.link(n);
        let target = fs::read_link(&link).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => ProfileError::NoSuchGeneration(n),
            _ => io_err(&link)(e),
        })?;
        let target = target.to_string_lossy().into_owned();
        let item = store
            .parse_rendered(&target)
            .map_err(|_| ProfileError::BadGeneration { number: n, target })?;
        let manifest = Manifest::new(
            union_entries(store, &item)?
                .into_iter()
                .map(|e| PackageRef::exact(&e.name, &e.version))
                .collect(),
        );
        let created_at = fs::symlink_metadata(&link).and_then(|m| m.modified()).ok();
        Ok(Generation {
            number: n,
            item,
            manifest,
            created_at,
            current: current == Some(n),
        })
    }

    pub fn list_generations(&self, store: &dyn StoreOps) -> Result<Vec<Generation>> {
        let current = self.current_number()?;
        self.numbers()?
            .into_iter()
            .map(|n| self.generation(store, n, current))
            .collect()
    }

    pub fn current(&self, store: &dyn StoreOps) -> Result<Option<Generation>> {
        match self.current_number()? {
            Some(n) => Ok(Some(self.generation(store, n, Some(n))?)),
            None => Ok(None),
        }
    }

    /// Points `<name>` at generation `n` with an atomic rename.
    fn flip(&self, n: u64) -> Result<(), ProfileError> {
        let tmp = self.dir.join(format!(".{}.{}.tmp", self.name, std::process::id()));
        let _ = fs::remove_file(&tmp);
        symlink(format!("{}-{n}-link", self.name), &tmp).map_err(io_err(&tmp))?;
        fs::rename(&tmp, self.path()).map_err(io_err(&self.path()))
    }

    /// Builds a generation for `packages` and makes it current, unless the
    /// current generation already is that item.
    fn commit(&self, ctx: &Context, packages: &[Arc<Package>]) -> Result<Generation> {
        let cctx = ctx.store.compile_context(ctx.system)?;
        let graph = compile_union("profile", packages, false, &cctx)?;
        let item = ctx.store.realize(&graph, ctx.options)?.output()?;
        let current = self.current_number()?;
        if let Some(c) = current {
            let gen = self.generation(ctx.store, c, current)?;
            if gen.item == item {
                return Ok(gen);
            }
        }
        let next = self.numbers()?.last().copied().unwrap_or(0) + 1;
        let link = self.link(next);
        let _ = fs::remove_file(&link);
        symlink(ctx.store.render(&item), &link).map_err(io_err(&link))?;
        ctx.store
            .add_root("", &self.path().display().to_string(), RootKind::Indirect)?;
        self.flip(next)?;
        self.generation(ctx.store, next, Some(next))
    }

    fn current_packages(&self, ctx: &Context) -> Result<Vec<Arc<Package>>> {
        let Some(gen) = self.current(ctx.store)? else {
            return Ok(Vec::new());
        };
        gen.manifest
            .entries
            .iter()
            .map(|r| Ok(ctx.recipes.resolve(r)?))
            .collect()
    }

    /// Removes then installs in one step. Installing a name that is
    /// already present replaces that entry.
    pub fn apply_transaction(
        &self,
        ctx: &Context,
        installs: &[PackageRef],
        removals: &[PackageRef],
    ) -> Result<Generation> {
        let _lock = self.lock()?;
        let mut packages = self.current_packages(ctx)?;
        for r in removals {
            let before = packages.len();
            packages.retain(|p| !r.matches(p));
            if packages.len() == before {
                return Err(ProfileError::NotInstalled(r.to_string()).into());
            }
        }
        for r in installs {
            let pkg = ctx.recipes.resolve(r)?;
            packages.retain(|p| p.name != pkg.name);
            packages.push(pkg);
        }
        self.commit(ctx, &packages)
    }

    /// Makes the profile hold exactly the manifest's packages.
    pub fn apply_manifest(&self, ctx: &Context, manifest: &Manifest) -> Result<Generation> {
        let _lock = self.lock()?;
        let mut seen = HashSet::new();
        let mut packages = Vec::new();
        for r in &manifest.entries {
            let pkg = ctx.recipes.resolve(r)?;
            if !seen.insert(pkg.full_name()) {
                return Err(ProfileError::Duplicate(pkg.full_name()).into());
            }
            packages.push(pkg);
        }
        self.commit(ctx, &packages)
    }

    pub fn switch_generation(&self, store: &dyn StoreOps, n: u64) -> Result<Generation> {
        let _lock = self.lock()?;
        let gen = self.generation(store, n, Some(n))?;
        self.flip(n)?;
        Ok(gen)
    }

    /// Switches to the closest older generation.
    pub fn rollback(&self, store: &dyn StoreOps) -> Result<Generation> {
        let _lock = self.lock()?;
        let current = self.current_number()?.ok_or(ProfileError::NothingToRollBack)?;
        let previous = self
            .numbers()?
            .into_iter()
            .filter(|n| *n < current)
            .max()
            .ok_or(ProfileError::NothingToRollBack)?;
        let gen = self.generation(store, previous, Some(previous))?;
        self.flip(previous)?;
        Ok(gen)
    }

    pub fn delete_generation(&self, n: u64) -> Result<(), ProfileError> {
        let _lock = self.lock()?;
        if self.current_number()? == Some(n) {
            return Err(ProfileError::DeleteCurrent(n));
        }
        fs::remove_file(self.link(n)).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => ProfileError::NoSuchGeneration(n),
            _ => io_err(&self.link(n))(e),
        })
    }

    /// Definitions for the current generation; empty without one.
    pub fn search_paths(&self, store: &dyn StoreOps) -> Result<Vec<SearchPath>> {
        match self.current(store)? {
            Some(gen) => item_search_paths(store, &gen.item),
            None => Ok(Vec::new()),
        }
    }
}

/// Variables passed through by a pure environment, with fallbacks.
pub const PURE_KEEP: [(&str, &str); 3] = [("HOME", "/"), ("TERM", "dumb"), ("TMPDIR", "/tmp")];

/// A built environment for a package's inputs.
#[derive(Debug, Clone)]
pub struct Environment {
    pub item: StorePath,
    /// Temp root holding `item` until released.
    pub root: String,
    pub search_paths: Vec<SearchPath>,
    pub shell: PathBuf,
}

/// Builds a union of `pkg`'s direct inputs plus the bootstrap seed and
/// roots it for the lifetime of the returned environment.
pub fn prepare_environment(store: &dyn StoreOps, pkg: &Package, system: &str, options: RealizeOptions) -> Result<Environment> {
    let cctx = store.compile_context(system)?;
    let inputs: Vec<Arc<Package>> = pkg.inputs.iter().map(|i| i.package.clone()).collect();
    let graph = compile_union("environment", &inputs, true, &cctx)?;
    let item = store.realize(&graph, options)?.output()?;
    let root = store.add_root("", &store.render(&item), RootKind::Temp)?;
    let search_paths = item_search_paths(store, &item)?;
    let shell = store.physical_path(&cctx.bootstrap).join("bin/sh");
    Ok(Environment {
        item,
        root,
        search_paths,
        shell,
    })
}

impl Environment {
    /// The exact environment of a pure shell: search paths plus
    /// [`PURE_KEEP`] taken from `host`.
    pub fn pure_vars(&self, host: &BTreeMap<String, String>) -> BTreeMap<String, String> {
        let mut vars: BTreeMap<String, String> = self
            .search_paths
            .iter()
            .map(|s| (s.variable.clone(), s.value.clone()))
            .collect();
        for (k, default) in PURE_KEEP {
            vars.insert(k.to_string(), host.get(k).cloned().unwrap_or_else(|| default.to_string()));
        }
        vars
    }

    /// `host` with the search paths prepended.
    pub fn augmented_vars(&self, host: &BTreeMap<String, String>) -> BTreeMap<String, String> {
        let mut vars = host.clone();
        for s in &self.search_paths {
            let value = match host.get(&s.variable).filter(|v| !v.is_empty()) {
                Some(old) => format!("{}{}{old}", s.value, s.separator),
                None => s.value.clone(),
            };
            vars.insert(s.variable.clone(), value);
        }
        vars
    }

    /// Runs `command` (or an interactive shell) with exactly `vars`.
    pub fn run(&self, vars: &BTreeMap<String, String>, command: &[String]) -> io::Result<ExitStatus> {
        let mut cmd = Command::new(&self.shell);
        if !command.is_empty() {
            cmd.arg("-c").arg(command.join(" "));
        }
        cmd.env_clear().envs(vars).status()
    }

    pub fn release(&self, store: &dyn StoreOps) -> Result<()> {
        store.remove_root(&self.root)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn export_syntax() {
        let s = SearchPath {
            variable: "PATH".into(),
            value: "/s/x-profile/bin".into(),
            separator: ":".into(),
        };
        assert_eq!(s.export_line(), "export PATH=\"/s/x-profile/bin${PATH:+:}$PATH\"");
    }

    #[test]
    fn manifest_document() {
        let m = Manifest::parse(r#"{"packages": ["gnu-make", "openmpi@1.8.1"]}"#, Path::new("m.json")).unwrap();
        assert_eq!(m.entries, vec![PackageRef::new("gnu-make"), PackageRef::exact("openmpi", "1.8.1")]);
        assert!(Manifest::parse(r#"{"packages": ["@x"]}"#, Path::new("m.json")).is_err());
        assert!(Manifest::parse(r#"{"pkgs": []}"#, Path::new("m.json")).is_err());
    }
}
