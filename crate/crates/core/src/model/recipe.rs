//! Recipe documents and the resolved recipe set.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use super::{
    compare_versions, Arguments, BuildSystem, Input, Metadata, ModelError, Origin, Package, PackageRef,
    SearchPathSpec,
};

/// Colon-separated recipe directories, highest precedence last.
pub const PACKAGE_PATH_VAR: &str = "HERMIT_PACKAGE_PATH";

pub fn recipe_path_from_env() -> Vec<PathBuf> {
    std::env::var(PACKAGE_PATH_VAR)
        .map(|v| v.split(':').filter(|s| !s.is_empty()).map(PathBuf::from).collect())
        .unwrap_or_default()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecipeDoc {
    packages: Vec<RawRecipe>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct RawRecipe {
    name: Option<String>,
    version: Option<String>,
    source: Option<Origin>,
    build_system: Option<BuildSystem>,
    inputs: Option<Vec<(String, PackageRef)>>,
    arguments: Option<Arguments>,
    search_paths: Option<Vec<SearchPathSpec>>,
    inherit: Option<PackageRef>,
    synopsis: Option<String>,
    description: Option<String>,
    home_page: Option<String>,
    license: Option<String>,
}

struct Entry {
    dir: usize,
    file: PathBuf,
    raw: RawRecipe,
}

/// A recipe with inheritance applied but inputs still unresolved.
#[derive(Clone)]
struct Merged {
    name: String,
    version: String,
    source: Option<Origin>,
    build_system: Option<BuildSystem>,
    inputs: Vec<(String, PackageRef)>,
    arguments: Arguments,
    search_paths: Vec<SearchPathSpec>,
    metadata: Metadata,
    inherit: Option<PackageRef>,
}

/// The resolved set of packages visible from a recipe search path.
/// Immutable once loaded.
#[derive(Debug, Clone, Default)]
pub struct RecipeSet {
    by_name: BTreeMap<String, Vec<Arc<Package>>>,
}

impl RecipeSet {
    /// Builds a set from already-resolved packages (later entries shadow
    /// earlier ones with the same name and version).
    pub fn from_packages(packages: impl IntoIterator<Item = Arc<Package>>) -> Self {
        let mut set = Self::default();
        for p in packages {
            let versions = set.by_name.entry(p.name.clone()).or_default();
            versions.retain(|q| q.version != p.version);
            versions.push(p);
            versions.sort_by(|a, b| compare_versions(&a.version, &b.version));
        }
        set
    }

    pub fn len(&self) -> usize {
        self.by_name.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    /// All packages, by name then ascending version.
    pub fn packages(&self) -> impl Iterator<Item = &Arc<Package>> {
        self.by_name.values().flatten()
    }

    pub fn get(&self, wanted: &PackageRef) -> Option<&Arc<Package>> {
        let versions = self.by_name.get(&wanted.name)?;
        match &wanted.version {
            Some(v) => versions.iter().find(|p| p.version == *v),
            None => versions.last(),
        }
    }

    pub fn resolve(&self, wanted: &PackageRef) -> Result<Arc<Package>, ModelError> {
        self.get(wanted).cloned().ok_or_else(|| ModelError::UnknownPackage {
            wanted: wanted.to_string(),
            suggestions: self.suggestions(&wanted.name),
        })
    }

    /// Known names close to `name`, for diagnostics.
    pub fn suggestions(&self, name: &str) -> Vec<String> {
        let mut scored: Vec<(usize, &String)> = self
            .by_name
            .keys()
            .map(|k| (edit_distance(k, name), k))
            .filter(|(d, k)| *d <= 2.max(name.len() / 3) || k.contains(name))
            .collect();
        scored.sort();
        scored.into_iter().take(3).map(|(_, k)| k.clone()).collect()
    }
}

fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1];
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != *cb);
            cur.push(sub.min(prev[j + 1] + 1).min(cur[j] + 1));
        }
        prev = cur;
    }
    prev[b.len()]
}

fn read_dir_recipes(dir: &Path) -> Result<Vec<PathBuf>, ModelError> {
    let io = |source| ModelError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

fn absolute_uri(uri: &str, base: &Path) -> String {
    if uri.starts_with("file://") {
        return uri.to_string();
    }
    let p = Path::new(uri);
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let resolved = fs::canonicalize(&joined).unwrap_or(joined);
    format!("file://{}", resolved.display())
}

fn parse_file(path: &Path) -> Result<Vec<RawRecipe>, ModelError> {
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let doc: RecipeDoc = serde_json::from_str(&text).map_err(|e| ModelError::Parse {
        file: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for mut raw in doc.packages {
        if let Some(src) = &mut raw.source {
            src.validate().map_err(|message| ModelError::Invalid {
                file: path.to_path_buf(),
                message,
            })?;
            src.uri = absolute_uri(&src.uri, base);
        }
        for spec in raw.search_paths.iter().flatten() {
            spec.validate().map_err(|message| ModelError::Invalid {
                file: path.to_path_buf(),
                message,
            })?;
        }
        if raw.name.is_none() && raw.inherit.is_none() {
            return Err(ModelError::Invalid {
                file: path.to_path_buf(),
                message: "package without a name".into(),
            });
        }
        out.push(raw);
    }
    Ok(out)
}

struct Loader {
    entries: Vec<Entry>,
    versions: Vec<Option<String>>,
    merged: Vec<Option<Merged>>,
}

impl Loader {
    fn name(&self, i: usize) -> &str {
        let raw = &self.entries[i].raw;
        raw.name
            .as_deref()
            .or(raw.inherit.as_ref().map(|r| r.name.as_str()))
            .expect("checked at parse time")
    }

    fn label(&self, i: usize) -> String {
        match &self.versions[i] {
            Some(v) => format!("{}@{}", self.name(i), v),
            None => self.name(i).to_string(),
        }
    }

    fn version(&mut self, i: usize, visiting: &mut Vec<usize>) -> Result<String, ModelError> {
        if let Some(v) = &self.versions[i] {
            return Ok(v.clone());
        }
        if let Some(v) = self.entries[i].raw.version.clone() {
            self.versions[i] = Some(v.clone());
            return Ok(v);
        }
        let parent_ref = self.entries[i].raw.inherit.clone().ok_or_else(|| ModelError::Invalid {
            file: self.entries[i].file.clone(),
            message: format!("package `{}` has no version", self.name(i)),
        })?;
        let parent = self.resolve(&parent_ref, Some(i), visiting)?;
        let v = self.version(parent, visiting)?;
        self.versions[i] = Some(v.clone());
        Ok(v)
    }

    /// Picks the visible entry for `wanted`, never `exclude`.
    fn resolve(&mut self, wanted: &PackageRef, exclude: Option<usize>, visiting: &mut Vec<usize>) -> Result<usize, ModelError> {
        if let Some(i) = exclude {
            if let Some(pos) = visiting.iter().position(|&v| v == i) {
                let mut cycle: Vec<String> = visiting[pos..].iter().map(|&j| self.name(j).to_string()).collect();
                cycle.push(self.name(i).to_string());
                return Err(ModelError::InheritanceCycle(cycle));
            }
            visiting.push(i);
        }
        let candidates: Vec<usize> = (0..self.entries.len())
            .filter(|&j| Some(j) != exclude && self.name(j) == wanted.name)
            .collect();
        let mut visible: BTreeMap<String, usize> = BTreeMap::new();
        for j in candidates {
            let v = self.version(j, visiting)?;
            if let Some(&k) = visible.get(&v) {
                if self.entries[k].dir == self.entries[j].dir {
                    return Err(ModelError::DuplicateDefinition(format!("{}@{v}", wanted.name)));
                }
                if self.entries[j].dir < self.entries[k].dir {
                    continue;
                }
            }
            visible.insert(v, j);
        }
        if exclude.is_some() {
            visiting.pop();
        }
        let found = match &wanted.version {
            Some(v) => visible.get(v).copied(),
            None => visible
                .iter()
                .max_by(|a, b| compare_versions(a.0, b.0))
                .map(|(_, &j)| j),
        };
        found.ok_or_else(|| ModelError::UnknownPackage {
            wanted: wanted.to_string(),
            suggestions: Vec::new(),
        })
    }

    fn merge(&mut self, i: usize, visiting: &mut Vec<usize>) -> Result<Merged, ModelError> {
        if let Some(m) = &self.merged[i] {
            return Ok(m.clone());
        }
        let version = self.version(i, visiting)?;
        let raw = self.entries[i].raw.clone();
        let parent = match &raw.inherit {
            Some(r) => {
                let p = self.resolve(r, Some(i), visiting)?;
                if let Some(pos) = visiting.iter().position(|&j| j == p) {
                    let mut cycle: Vec<String> = visiting[pos..].iter().map(|&j| self.label(j)).collect();
                    cycle.push(self.label(i));
                    cycle.push(self.label(p));
                    return Err(ModelError::InheritanceCycle(cycle));
                }
                visiting.push(i);
                let m = self.merge(p, visiting);
                visiting.pop();
                Some(m?)
            }
            None => None,
        };
        let name = self.name(i).to_string();
        let merged = match parent {
            None => Merged {
                name,
                version,
                source: raw.source,
                build_system: raw.build_system,
                inputs: raw.inputs.unwrap_or_default(),
                arguments: raw.arguments.unwrap_or_default(),
                search_paths: raw.search_paths.unwrap_or_default(),
                metadata: Metadata {
                    synopsis: raw.synopsis,
                    description: raw.description,
                    home_page: raw.home_page,
                    license: raw.license,
                },
                inherit: None,
            },
            Some(p) => Merged {
                name,
                version,
                source: raw.source.or(p.source),
                build_system: raw.build_system.or(p.build_system),
                inputs: raw.inputs.unwrap_or(p.inputs),
                arguments: raw.arguments.unwrap_or(p.arguments),
                search_paths: raw.search_paths.unwrap_or(p.search_paths),
                metadata: Metadata {
                    synopsis: raw.synopsis.or(p.metadata.synopsis),
                    description: raw.description.or(p.metadata.description),
                    home_page: raw.home_page.or(p.metadata.home_page),
                    license: raw.license.or(p.metadata.license),
                },
                inherit: Some(PackageRef::exact(&p.name, &p.version)),
            },
        };
        self.merged[i] = Some(merged.clone());
        Ok(merged)
    }
}

/// Loads every `*.json` recipe document of every directory. Later
/// directories shadow earlier ones for the same name and version.
pub fn load_recipes(dirs: &[PathBuf]) -> Result<RecipeSet, ModelError> {
    let mut entries = Vec::new();
    for (d, dir) in dirs.iter().enumerate() {
        for file in read_dir_recipes(dir)? {
            for raw in parse_file(&file)? {
                entries.push(Entry {
                    dir: d,
                    file: file.clone(),
                    raw,
                });
            }
        }
    }
    let n = entries.len();
    let mut loader = Loader {
        entries,
        versions: vec![None; n],
        merged: vec![None; n],
    };

    // Visible entries keyed by (name, version).
    let mut visible: BTreeMap<(String, String), usize> = BTreeMap::new();
    for i in 0..n {
        let v = loader.version(i, &mut Vec::new())?;
        let key = (loader.name(i).to_string(), v);
        if let Some(&k) = visible.get(&key) {
            if loader.entries[k].dir == loader.entries[i].dir {
                return Err(ModelError::DuplicateDefinition(format!("{}@{}", key.0, key.1)));
            }
        }
        visible.insert(key, i);
    }
    let mut merged: BTreeMap<(String, String), (Merged, PathBuf)> = BTreeMap::new();
    for (key, &i) in &visible {
        let m = loader.merge(i, &mut Vec::new())?;
        if m.build_system.is_none() {
            return Err(ModelError::Invalid {
                file: loader.entries[i].file.clone(),
                message: format!("package `{}-{}` has no build-system", key.0, key.1),
            });
        }
        merged.insert(key.clone(), (m, loader.entries[i].file.clone()));
    }

    let mut by_name: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (name, version) in merged.keys() {
        by_name.entry(name.clone()).or_default().push(version.clone());
    }
    let pick = |r: &PackageRef| -> Option<(String, String)> {
        let versions = by_name.get(&r.name)?;
        let v = match &r.version {
            Some(v) => versions.iter().find(|x| *x == v)?,
            None => versions.iter().max_by(|a, b| compare_versions(a, b))?,
        };
        Some((r.name.clone(), v.clone()))
    };

    let mut built: HashMap<(String, String), Arc<Package>> = HashMap::new();
    fn build(
        key: &(String, String),
        merged: &BTreeMap<(String, String), (Merged, PathBuf)>,
        pick: &dyn Fn(&PackageRef) -> Option<(String, String)>,
        built: &mut HashMap<(String, String), Arc<Package>>,
        stack: &mut Vec<(String, String)>,
    ) -> Result<Arc<Package>, ModelError> {
        if let Some(p) = built.get(key) {
            return Ok(p.clone());
        }
        if let Some(pos) = stack.iter().position(|k| k == key) {
            let mut cycle: Vec<String> = stack[pos..].iter().map(|(n, v)| format!("{n}-{v}")).collect();
            cycle.push(format!("{}-{}", key.0, key.1));
            return Err(ModelError::InputCycle(cycle));
        }
        let (m, _file) = &merged[key];
        stack.push(key.clone());
        let mut inputs = Vec::new();
        for (label, r) in &m.inputs {
            let dep = pick(r).ok_or_else(|| ModelError::UnresolvedInput {
                package: format!("{}-{}", m.name, m.version),
                label: label.clone(),
                wanted: r.to_string(),
            })?;
            let pkg = build(&dep, merged, pick, built, stack)?;
            inputs.push(Input {
                label: label.clone(),
                package: pkg,
            });
        }
        stack.pop();
        let pkg = Package {
            name: m.name.clone(),
            version: m.version.clone(),
            source: m.source.clone(),
            build_system: m.build_system.expect("checked above"),
            inputs,
            arguments: m.arguments.clone(),
            search_paths: m.search_paths.clone(),
            metadata: m.metadata.clone(),
            inherit_from: m.inherit.clone(),
        };
        pkg.check_labels()?;
        let pkg = Arc::new(pkg);
        built.insert(key.clone(), pkg.clone());
        Ok(pkg)
    }
    for key in merged.keys() {
        build(key, &merged, &pick, &mut built, &mut Vec::new())?;
    }
    let mut keys: Vec<_> = built.keys().cloned().collect();
    keys.sort();
    Ok(RecipeSet::from_packages(keys.into_iter().map(|k| built[&k].clone())))
}
