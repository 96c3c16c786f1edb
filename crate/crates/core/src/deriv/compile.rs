//! Lowering of package values to derivation graphs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Builder, DerivError, Derivation, FixedOutput};
use crate::model::{BuildSystem, Package, SearchPathSpec};
use crate::store::{text_path, StorePath};

/// Label under which the bootstrap seed is made available to generic builds.
pub const BOOTSTRAP_LABEL: &str = "bootstrap";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompileContext {
    pub logical_root: String,
    pub system: String,
    /// The bootstrap seed item providing the builder shell.
    pub bootstrap: StorePath,
}

impl CompileContext {
    pub fn render(&self, path: &StorePath) -> String {
        format!("{}/{}", self.logical_root, path.base_name())
    }
}

/// One member of a union item, as recorded in its `.hermit-manifest`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct UnionEntry {
    pub name: String,
    pub version: String,
    /// Rendered store path.
    pub path: String,
    pub search_paths: Vec<SearchPathSpec>,
}

/// A root derivation plus everything it needs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DerivationGraph {
    /// Digest of the root derivation.
    pub root: String,
    pub nodes: BTreeMap<String, Derivation>,
    /// Text items that must be in the store before building.
    pub sources: BTreeMap<StorePath, Vec<u8>>,
}

impl DerivationGraph {
    pub fn root_drv(&self) -> &Derivation {
        &self.nodes[&self.root]
    }

    pub fn output(&self) -> StorePath {
        self.root_drv().output_path().expect("compiled derivations have valid names")
    }

    /// Digests of the derivations `digest` depends on directly.
    pub fn dependencies(&self, digest: &str) -> Vec<String> {
        self.nodes
            .get(digest)
            .map(|d| d.input_drvs.iter().map(|(d, _)| d.clone()).collect())
            .unwrap_or_default()
    }

    /// Every node reachable from the root, dependencies first, ties broken
    /// by digest.
    pub fn topological(&self) -> Result<Vec<String>, DerivError> {
        let mut reachable = BTreeSet::new();
        let mut stack = vec![self.root.clone()];
        while let Some(d) = stack.pop() {
            if !self.nodes.contains_key(&d) {
                return Err(DerivError::Parse(format!("graph lacks derivation {d}")));
            }
            if reachable.insert(d.clone()) {
                stack.extend(self.dependencies(&d));
            }
        }
        let mut pending: BTreeMap<&String, usize> = BTreeMap::new();
        let mut dependents: BTreeMap<String, Vec<&String>> = BTreeMap::new();
        for d in &reachable {
            let deps = self.dependencies(d);
            pending.insert(d, deps.len());
            for dep in deps {
                dependents.entry(dep).or_default().push(d);
            }
        }
        let mut ready: BTreeSet<&String> = pending.iter().filter(|(_, n)| **n == 0).map(|(d, _)| *d).collect();
        let mut order = Vec::new();
        while let Some(d) = ready.pop_first() {
            order.push(d.clone());
            for dep in dependents.get(d).into_iter().flatten() {
                let n = pending.get_mut(dep).expect("reachable");
                *n -= 1;
                if *n == 0 {
                    ready.insert(dep);
                }
            }
        }
        if order.len() != reachable.len() {
            return Err(DerivError::Parse("derivation graph has a cycle".into()));
        }
        Ok(order)
    }

    /// Rebuilds a graph from serialized derivations, checking that every
    /// input derivation is present and that output paths agree.
    pub fn from_texts(
        root: &str,
        texts: &[String],
        sources: BTreeMap<StorePath, Vec<u8>>,
    ) -> Result<Self, DerivError> {
        let mut nodes = BTreeMap::new();
        for t in texts {
            let d = Derivation::parse(t)?;
            d.validate()?;
            nodes.insert(d.digest(), d);
        }
        let graph = Self {
            root: root.to_string(),
            nodes,
            sources,
        };
        for d in graph.nodes.values() {
            for (dep, path) in &d.input_drvs {
                let node = graph
                    .nodes
                    .get(dep)
                    .ok_or_else(|| DerivError::Parse(format!("{} needs missing derivation {dep}", d.name)))?;
                let expected = node.output_path()?;
                if !path.ends_with(&format!("/{}", expected.base_name())) {
                    return Err(DerivError::Parse(format!("{} lists {path} for {dep}", d.name)));
                }
            }
        }
        for (path, text) in &graph.sources {
            if text_path(path.name(), text)? != *path {
                return Err(DerivError::Parse(format!("source {path} does not match its contents")));
            }
        }
        graph.topological()?;
        Ok(graph)
    }

    pub fn texts(&self) -> Vec<String> {
        self.nodes.values().map(Derivation::serialize).collect()
    }
}

/// Double-quotes a word for the builder shell; `$` stays live.
fn quote_word(w: &str) -> String {
    let mut out = String::with_capacity(w.len() + 2);
    out.push('"');
    for c in w.chars() {
        if matches!(c, '"' | '\\' | '`') {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

pub(crate) fn script(commands: &[Vec<String>]) -> String {
    let mut s = String::from("set -e\n");
    for argv in commands {
        let words: Vec<String> = argv.iter().map(|w| quote_word(w)).collect();
        s.push_str(&words.join(" "));
        s.push('\n');
    }
    s
}

pub(crate) fn env_key(label: &str) -> String {
    let mapped: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("input_{mapped}")
}

struct Compiler<'a> {
    ctx: &'a CompileContext,
    memo: HashMap<*const Package, (String, String)>,
    graph: DerivationGraph,
}

impl Compiler<'_> {
    fn add(&mut self, drv: Derivation) -> Result<(String, String), DerivError> {
        drv.validate()?;
        let digest = drv.digest();
        let out = self.ctx.render(&drv.output_path()?);
        self.graph.nodes.insert(digest.clone(), drv);
        Ok((digest, out))
    }

    fn base_env(&self, name: &str) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("name".to_string(), name.to_string()),
            ("system".to_string(), self.ctx.system.clone()),
            ("out".to_string(), String::new()),
        ])
    }

    /// Input derivations and environment entries for labeled inputs.
    fn inputs(
        &mut self,
        pkg: &Package,
        drv: &mut Derivation,
    ) -> Result<Vec<String>, DerivError> {
        let mut outs = Vec::new();
        for input in &pkg.inputs {
            let (digest, out) = self.package(&input.package)?;
            let key = env_key(&input.label);
            if drv.env.insert(key.clone(), out.clone()).is_some() {
                return Err(DerivError::Invalid {
                    name: pkg.full_name(),
                    message: format!("input label `{}` clashes with another variable `{key}`", input.label),
                });
            }
            drv.input_drvs.push((digest, out.clone()));
            outs.push(out);
        }
        Ok(outs)
    }

    fn finish(drv: &mut Derivation) {
        drv.input_drvs.sort();
        drv.input_drvs.dedup();
        drv.input_srcs.sort();
        drv.input_srcs.dedup();
    }

    fn package(&mut self, pkg: &Arc<Package>) -> Result<(String, String), DerivError> {
        let key = Arc::as_ptr(pkg);
        if let Some(done) = self.memo.get(&key) {
            return Ok(done.clone());
        }
        let full = pkg.full_name();
        let mut drv;
        match pkg.build_system {
            BuildSystem::Generic => {
                let origin = pkg.source.as_ref().ok_or_else(|| DerivError::MissingSource(full.clone()))?;
                let mut fetch = Derivation::new(&format!("{full}-source"), &self.ctx.system, Builder::Fetch);
                fetch.args.push(origin.uri.clone());
                fetch.fixed = Some(FixedOutput::sha256(&origin.sha256));
                let (src_digest, src_out) = self.add(fetch)?;

                drv = Derivation::new(&full, &self.ctx.system, Builder::Exec);
                drv.env = self.base_env(&full);
                let bootstrap = self.ctx.render(&self.ctx.bootstrap);
                drv.env.insert(env_key(BOOTSTRAP_LABEL), bootstrap.clone());
                drv.input_srcs.push(bootstrap.clone());
                let outs = self.inputs(pkg, &mut drv)?;
                drv.env.insert("src".into(), src_out.clone());
                drv.input_drvs.push((src_digest, src_out));
                let path: Vec<String> = std::iter::once(&bootstrap)
                    .chain(&outs)
                    .map(|p| format!("{p}/bin"))
                    .collect();
                drv.env.insert("PATH".into(), path.join(":"));
                if !pkg.arguments.configure_flags.is_empty() {
                    drv.env
                        .insert("configureFlags".into(), pkg.arguments.configure_flags.join("\u{1f}"));
                }
                drv.args = vec![
                    format!("{bootstrap}/bin/sh"),
                    "-c".to_string(),
                    script(&pkg.arguments.commands),
                ];
            }
            BuildSystem::Trivial => {
                let triples: Vec<[&str; 3]> = pkg
                    .arguments
                    .files
                    .iter()
                    .map(|f| [f.path.as_str(), f.mode.as_str(), f.content.as_str()])
                    .collect();
                let manifest = serde_json::to_vec(&triples).expect("string triples serialize");
                let manifest_path = text_path(&format!("{full}-files"), &manifest)?;
                let rendered = self.ctx.render(&manifest_path);
                self.graph.sources.insert(manifest_path, manifest);
                drv = Derivation::new(&full, &self.ctx.system, Builder::WriteFiles);
                drv.env = self.base_env(&full);
                self.inputs(pkg, &mut drv)?;
                drv.args.push(rendered.clone());
                drv.input_srcs.push(rendered);
            }
            BuildSystem::Union => {
                drv = Derivation::new(&full, &self.ctx.system, Builder::Union);
                drv.env = self.base_env(&full);
                let outs = self.inputs(pkg, &mut drv)?;
                let entries: Vec<UnionEntry> = pkg
                    .inputs
                    .iter()
                    .zip(&outs)
                    .map(|(i, out)| entry_for(&i.package, out))
                    .collect();
                drv.env.insert("manifest".into(), manifest_json(&entries));
                drv.args = outs;
            }
        }
        Self::finish(&mut drv);
        let result = self.add(drv)?;
        self.memo.insert(key, result.clone());
        Ok(result)
    }
}

fn entry_for(pkg: &Package, out: &str) -> UnionEntry {
    UnionEntry {
        name: pkg.name.clone(),
        version: pkg.version.clone(),
        path: out.to_string(),
        search_paths: pkg.search_paths.clone(),
    }
}

fn manifest_json(entries: &[UnionEntry]) -> String {
    serde_json::to_string(entries).expect("manifest entries serialize")
}

/// Lowers `pkg` and everything it depends on.
pub fn compile(pkg: &Arc<Package>, ctx: &CompileContext) -> Result<DerivationGraph, DerivError> {
    let mut c = Compiler {
        ctx,
        memo: HashMap::new(),
        graph: DerivationGraph::default(),
    };
    let (root, _) = c.package(pkg)?;
    c.graph.root = root;
    Ok(c.graph)
}

/// A union item named `name` over `packages`, in order. With
/// `with_bootstrap`, the bootstrap seed comes first.
pub fn compile_union(
    name: &str,
    packages: &[Arc<Package>],
    with_bootstrap: bool,
    ctx: &CompileContext,
) -> Result<DerivationGraph, DerivError> {
    let mut c = Compiler {
        ctx,
        memo: HashMap::new(),
        graph: DerivationGraph::default(),
    };
    let mut drv = Derivation::new(name, &ctx.system, Builder::Union);
    drv.env = c.base_env(name);
    let mut entries = Vec::new();
    if with_bootstrap {
        let bootstrap = ctx.render(&ctx.bootstrap);
        entries.push(UnionEntry {
            name: BOOTSTRAP_LABEL.to_string(),
            version: "seed".to_string(),
            path: bootstrap.clone(),
            search_paths: vec![SearchPathSpec::new("PATH", "bin")],
        });
        drv.input_srcs.push(bootstrap.clone());
        drv.args.push(bootstrap);
    }
    for pkg in packages {
        let (digest, out) = c.package(pkg)?;
        entries.push(entry_for(pkg, &out));
        drv.input_drvs.push((digest, out.clone()));
        drv.args.push(out);
    }
    drv.env.insert("manifest".into(), manifest_json(&entries));
    Compiler::finish(&mut drv);
    let (root, _) = c.add(drv)?;
    c.graph.root = root;
    Ok(c.graph)
}
