//! The `hermit` command line.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{self, Read, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hermit_client::{ClientError, RemoteStore};
use hermit_core::build::{BuildError, BuildStatus, RealizeOptions};
use hermit_core::deriv::compile;
use hermit_core::model::{load_recipes, rewrite_inputs, transitive_input_names, Package, PackageRef, RecipeSet};
use hermit_core::ops::{LocalStore, RootKind, StoreOps};
use hermit_core::profile::{prepare_environment, Context, Manifest, Profile};
use hermit_core::store::StoreConfig;

/// Exit status for bad invocations; operational failures use 1.
pub const USAGE_EXIT: u8 = 2;

/// An invocation that cannot be carried out as written.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "hermit", version, about = "Functional package manager")]
pub struct Cli {
    /// State directory (daemon socket, database, GC roots).
    #[arg(long, global = true, env = "HERMIT_STATE", value_name = "DIR")]
    state: Option<PathBuf>,
    /// Store root used in item names; defaults to <state>/store.
    #[arg(long, global = true, env = "HERMIT_STORE", value_name = "DIR")]
    store: Option<String>,
    /// Colon-separated recipe directories, later ones take precedence.
    #[arg(long, global = true, env = "HERMIT_PACKAGE_PATH", value_name = "DIRS")]
    package_path: Option<String>,
    /// Target system.
    #[arg(long, global = true, value_name = "SYSTEM")]
    system: Option<String>,
    /// Open the store in this process instead of going through the daemon.
    #[arg(long, global = true)]
    no_daemon: bool,
    /// Print the resolved configuration and progress on stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build packages and print their output paths.
    Build(BuildArgs),
    /// Manage a profile.
    Package(PackageArgs),
    /// Run a command in an environment holding a package's inputs.
    Environment(EnvironmentArgs),
    /// Export or import store closures.
    Archive(ArchiveArgs),
    /// Delete store items no GC root reaches.
    Gc,
    /// Show a package's dependency graph.
    Graph(GraphArgs),
    /// Replace inputs throughout a package's graph, then build or show it.
    Rewrite(RewriteArgs),
    /// Run the store daemon in the foreground.
    Daemon,
}

#[derive(Args, Debug)]
struct BuildArgs {
    #[arg(required = true, value_name = "PKG[@VERSION]")]
    packages: Vec<String>,
    /// Rebuild already valid items and fail if the result differs.
    #[arg(long)]
    check: bool,
    /// Derivations built in parallel.
    #[arg(short, long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,
    /// Register the output as a GC root under this name.
    #[arg(short, long, value_name = "NAME")]
    root: Option<String>,
}

#[derive(Args, Debug)]
#[command(group(
    clap::ArgGroup::new("action")
        .required(true)
        .multiple(true)
        .args(["install", "remove", "manifest", "roll_back", "switch_generation", "list_generations", "search_paths"])
))]
struct PackageArgs {
    /// Profile link; defaults to ~/.hermit-profile.
    #[arg(short, long, value_name = "PROFILE")]
    profile: Option<PathBuf>,
    #[arg(short, long, num_args = 1.., value_name = "PKG")]
    install: Vec<String>,
    #[arg(short, long, num_args = 1.., value_name = "PKG")]
    remove: Vec<String>,
    /// Make the profile hold exactly the packages listed in FILE.
    #[arg(short, long, value_name = "FILE")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    roll_back: bool,
    #[arg(short = 'S', long, value_name = "N")]
    switch_generation: Option<u64>,
    #[arg(short, long)]
    list_generations: bool,
    /// Print shell lines setting the profile's search paths.
    #[arg(long)]
    search_paths: bool,
}

#[derive(Args, Debug)]
struct EnvironmentArgs {
    #[arg(value_name = "PKG[@VERSION]")]
    package: String,
    /// Start from an empty environment instead of the current one.
    #[arg(long)]
    pure: bool,
    /// Command to run; an interactive shell without one.
    #[arg(last = true, value_name = "CMD")]
    command: Vec<String>,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("direction").required(true).args(["export", "import"])))]
struct ArchiveArgs {
    /// Write the closure of these store paths to stdout.
    #[arg(long, num_args = 1.., value_name = "ROOT")]
    export: Vec<String>,
    /// Read an export stream from stdin.
    #[arg(long)]
    import: bool,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("format").args(["refs", "dot"])))]
struct GraphArgs {
    #[arg(value_name = "PKG[@VERSION]")]
    package: String,
    /// Print every package the graph depends on, once each.
    #[arg(long)]
    refs: bool,
    /// Emit the graph in dot format.
    #[arg(long)]
    dot: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Then {
    Build,
    Graph,
}

#[derive(Args, Debug)]
struct RewriteArgs {
    #[arg(value_name = "PKG[@VERSION]")]
    package: String,
    /// Point every input labeled LABEL to PKG2; repeatable.
    #[arg(long, required = true, value_name = "LABEL=PKG2")]
    replace: Vec<String>,
    #[arg(long, value_enum)]
    then: Then,
    #[arg(long)]
    check: bool,
}

/// Everything an invocation resolved before running.
struct Settings {
    state_dir: PathBuf,
    config: StoreConfig,
    recipe_dirs: Vec<PathBuf>,
    system: String,
    no_daemon: bool,
    verbose: bool,
}

impl Settings {
    fn resolve(cli: &Cli) -> Result<Self> {
        let state_dir = cli.state.clone().unwrap_or_else(hermit_daemon::default_state_dir);
        let config = hermit_daemon::store_config(&state_dir, cli.store.as_deref())?;
        let recipe_dirs = cli
            .package_path
            .as_deref()
            .unwrap_or_default()
            .split(':')
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
            .collect();
        let system = cli
            .system
            .clone()
            .unwrap_or_else(|| format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS));
        let s = Self {
            state_dir,
            config,
            recipe_dirs,
            system,
            no_daemon: cli.no_daemon,
            verbose: cli.verbose,
        };
        if s.verbose {
            eprintln!("state directory: {}", s.state_dir.display());
            eprintln!("store: {}", s.config.logical_root);
            eprintln!("recipe path: {}", join_paths(&s.recipe_dirs));
            eprintln!("system: {}", s.system);
            if s.no_daemon {
                eprintln!("backend: in-process");
            } else {
                eprintln!("backend: daemon at {}", s.socket().display());
            }
        }
        Ok(s)
    }

    fn socket(&self) -> PathBuf {
        hermit_daemon::socket_path(&self.state_dir)
    }

    fn open_store(&self) -> Result<Box<dyn StoreOps>> {
        if self.no_daemon {
            return Ok(Box::new(LocalStore::open(self.config.clone())?));
        }
        match RemoteStore::connect(&self.socket(), None) {
            Ok(r) => Ok(Box::new(r)),
            Err(e @ ClientError::DaemonNotRunning(_)) => {
                Err(anyhow::Error::new(e).context("start one with `hermit daemon`, or pass --no-daemon"))
            }
            Err(e) => Err(e.into()),
        }
    }

    fn recipes(&self) -> Result<RecipeSet> {
        if self.recipe_dirs.is_empty() {
            bail!("no recipe directories; set HERMIT_PACKAGE_PATH or pass --package-path");
        }
        Ok(load_recipes(&self.recipe_dirs)?)
    }
}

fn join_paths(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(":")
}

fn parse_ref(s: &str) -> Result<PackageRef> {
    s.parse::<PackageRef>().map_err(|e| usage(e.to_string()))
}

fn resolve(set: &RecipeSet, s: &str) -> Result<Arc<Package>> {
    Ok(set.resolve(&parse_ref(s)?)?)
}

/// Runs a parsed command line and returns the process exit status.
pub fn run(cli: Cli) -> Result<ExitCode> {
    let settings = Settings::resolve(&cli)?;
    let out = &mut io::stdout().lock();
    match cli.command {
        Command::Build(args) => build(&settings, args, out),
        Command::Package(args) => package(&settings, args, out),
        Command::Environment(args) => environment(&settings, args),
        Command::Archive(args) => archive(&settings, args, out),
        Command::Gc => gc(&settings, out),
        Command::Graph(args) => {
            let set = settings.recipes()?;
            let pkg = resolve(&set, &args.package)?;
            out.write_all(render_graph(&pkg, args.refs, args.dot).as_bytes())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Rewrite(args) => rewrite(&settings, args, out),
        Command::Daemon => {
            hermit_daemon::run(settings.config.clone(), &settings.socket())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn realize_all(
    settings: &Settings,
    store: &dyn StoreOps,
    packages: &[Arc<Package>],
    options: RealizeOptions,
    root: Option<&str>,
    out: &mut dyn Write,
) -> Result<ExitCode> {
    let cctx = store.compile_context(&settings.system)?;
    let mut failed = false;
    for (i, pkg) in packages.iter().enumerate() {
        let graph = compile(pkg, &cctx)?;
        let realization = store.realize(&graph, options)?;
        if settings.verbose {
            eprintln!(
                "{}: {} built, {} cached",
                pkg.full_name(),
                realization.count(BuildStatus::Built),
                realization.count(BuildStatus::Cached)
            );
        }
        match realization.output() {
            Ok(path) => {
                let rendered = store.render(&path);
                if let Some(name) = root {
                    let name = if packages.len() > 1 { format!("{name}-{i}") } else { name.to_string() };
                    store.add_root(&name, &rendered, RootKind::Direct)?;
                }
                writeln!(out, "{rendered}")?;
            }
            Err(e) => {
                for r in realization.results.values() {
                    if let Some(BuildError::Builder { path, .. }) = &r.error {
                        print_log_tail(path, &r.log);
                    }
                }
                eprintln!("hermit: {e}");
                failed = true;
            }
        }
    }
    Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

const LOG_TAIL_LINES: usize = 10;

fn print_log_tail(path: &str, log: &[u8]) {
    let text = String::from_utf8_lossy(log);
    let lines: Vec<&str> = text.lines().collect();
    if lines.is_empty() {
        return;
    }
    eprintln!("last lines of the log of {path}:");
    for l in &lines[lines.len().saturating_sub(LOG_TAIL_LINES)..] {
        eprintln!("  | {l}");
    }
}

fn build(settings: &Settings, args: BuildArgs, out: &mut dyn Write) -> Result<ExitCode> {
    let set = settings.recipes()?;
    let packages = args.packages.iter().map(|p| resolve(&set, p)).collect::<Result<Vec<_>>>()?;
    let store = settings.open_store()?;
    let options = RealizeOptions {
        check: args.check,
        jobs: args.jobs as usize,
    };
    realize_all(settings, store.as_ref(), &packages, options, args.root.as_deref(), out)
}

fn package(settings: &Settings, args: PackageArgs, out: &mut dyn Write) -> Result<ExitCode> {
    let transaction = !args.install.is_empty() || !args.remove.is_empty();
    let exclusive = [
        transaction,
        args.manifest.is_some(),
        args.roll_back,
        args.switch_generation.is_some(),
    ];
    if exclusive.iter().filter(|b| **b).count() > 1 {
        return Err(usage(
            "--install/--remove, --manifest, --roll-back and --switch-generation are mutually exclusive",
        ));
    }
    let profile = Profile::new(&args.profile.clone().unwrap_or_else(Profile::default_path))?;
    let store = settings.open_store()?;
    let needs_recipes = transaction || args.manifest.is_some();
    let set = if needs_recipes { settings.recipes()? } else { RecipeSet::default() };
    let ctx = Context {
        store: store.as_ref(),
        recipes: &set,
        system: &settings.system,
        options: RealizeOptions::default(),
    };
    let report = |g: &hermit_core::profile::Generation| {
        if settings.verbose {
            eprintln!("generation {}: {}", g.number, store.render(&g.item));
        }
    };
    if transaction {
        let installs = args.install.iter().map(|s| parse_ref(s)).collect::<Result<Vec<_>>>()?;
        let removals = args.remove.iter().map(|s| parse_ref(s)).collect::<Result<Vec<_>>>()?;
        report(&profile.apply_transaction(&ctx, &installs, &removals)?);
    }
    if let Some(file) = &args.manifest {
        report(&profile.apply_manifest(&ctx, &Manifest::load(file)?)?);
    }
    if args.roll_back {
        report(&profile.rollback(store.as_ref())?);
    }
    if let Some(n) = args.switch_generation {
        report(&profile.switch_generation(store.as_ref(), n)?);
    }
    if args.list_generations {
        for g in profile.list_generations(store.as_ref())? {
            let mark = if g.current { "\t(current)" } else { "" };
            writeln!(out, "Generation {}\t{}{mark}", g.number, store.render(&g.item))?;
            for e in &g.manifest.entries {
                writeln!(out, "  {}\t{}", e.name, e.version.as_deref().unwrap_or(""))?;
            }
            if settings.verbose {
                if let Some(t) = g.created_at.and_then(|t| t.duration_since(std::time::UNIX_EPOCH).ok()) {
                    eprintln!("generation {} created at {} (unix time)", g.number, t.as_secs());
                }
            }
        }
    }
    if args.search_paths {
        for sp in profile.search_paths(store.as_ref())? {
            writeln!(out, "{}", sp.export_line())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn environment(settings: &Settings, args: EnvironmentArgs) -> Result<ExitCode> {
    let set = settings.recipes()?;
    let pkg = resolve(&set, &args.package)?;
    let store = settings.open_store()?;
    let env = prepare_environment(store.as_ref(), &pkg, &settings.system, RealizeOptions::default())?;
    let host: BTreeMap<String, String> = std::env::vars().collect();
    let vars = if args.pure { env.pure_vars(&host) } else { env.augmented_vars(&host) };
    if settings.verbose {
        eprintln!("environment: {}", store.render(&env.item));
    }
    let status = env.run(&vars, &args.command);
    env.release(store.as_ref())?;
    let status = status.with_context(|| format!("cannot run {}", env.shell.display()))?;
    Ok(match status.code() {
        Some(0) => ExitCode::SUCCESS,
        Some(c) => ExitCode::from(u8::try_from(c).unwrap_or(1)),
        None => ExitCode::FAILURE,
    })
}

fn archive(settings: &Settings, args: ArchiveArgs, out: &mut dyn Write) -> Result<ExitCode> {
    let store = settings.open_store()?;
    if args.import {
        let mut stream = Vec::new();
        io::stdin().lock().read_to_end(&mut stream)?;
        let report = store.import(&mut stream.as_slice())?;
        for p in &report.paths {
            writeln!(out, "{}", store.render(p))?;
        }
        if settings.verbose {
            eprintln!("{} of {} items registered", report.registered.len(), report.paths.len());
        }
    } else {
        let roots = args
            .export
            .iter()
            .map(|r| store.parse_rendered(r).map_err(|e| usage(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let mut stream = Vec::new();
        let n = store.export(&roots, &mut stream)?;
        out.write_all(&stream)?;
        if settings.verbose {
            eprintln!("exported {n} items");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn gc(settings: &Settings, out: &mut dyn Write) -> Result<ExitCode> {
    let store = settings.open_store()?;
    let report = store.collect_garbage()?;
    for p in &report.deleted {
        writeln!(out, "{}", store.render(p))?;
    }
    if settings.verbose {
        eprintln!("freed {} bytes", report.freed_bytes);
    }
    for p in &report.skipped {
        eprintln!("hermit: {} is in use, kept", store.render(p));
    }
    Ok(ExitCode::SUCCESS)
}

fn rewrite(settings: &Settings, args: RewriteArgs, out: &mut dyn Write) -> Result<ExitCode> {
    let set = settings.recipes()?;
    let mut pkg = resolve(&set, &args.package)?;
    for r in &args.replace {
        let (label, with) = r
            .split_once('=')
            .filter(|(l, w)| !l.is_empty() && !w.is_empty())
            .ok_or_else(|| usage(format!("--replace expects LABEL=PKG, got `{r}`")))?;
        let replacement = resolve(&set, with)?;
        let rw = rewrite_inputs(&pkg, label, &replacement);
        if rw.rewrites == 0 {
            eprintln!("hermit: warning: no input labeled `{label}` in {}", pkg.full_name());
        } else if settings.verbose {
            eprintln!("{label}: {} edges rewritten", rw.rewrites);
        }
        pkg = rw.package;
    }
    match args.then {
        Then::Graph => {
            out.write_all(render_graph(&pkg, false, false).as_bytes())?;
            Ok(ExitCode::SUCCESS)
        }
        Then::Build => {
            let store = settings.open_store()?;
            let options = RealizeOptions {
                check: args.check,
                jobs: 1,
            };
            realize_all(settings, store.as_ref(), &[pkg], options, None, out)
        }
    }
}

/// Text for `hermit graph`: the dependency list, dot, or an indented tree.
pub fn render_graph(pkg: &Arc<Package>, refs: bool, dot: bool) -> String {
    if refs {
        let names: Vec<String> = transitive_input_names(pkg).iter().map(|n| format!("{n:?}")).collect();
        return format!("({})\n", names.join(" "));
    }
    if dot {
        return dot_graph(pkg);
    }
    let mut s = String::new();
    tree(pkg, None, 0, &mut s);
    s
}

fn tree(pkg: &Package, label: Option<&str>, depth: usize, s: &mut String) {
    let indent = "  ".repeat(depth);
    match label {
        Some(l) if l != pkg.name => writeln!(s, "{indent}{} [{l}]", pkg.full_name()),
        _ => writeln!(s, "{indent}{}", pkg.full_name()),
    }
    .expect("write to string");
    for input in &pkg.inputs {
        tree(&input.package, Some(&input.label), depth + 1, s);
    }
}

fn dot_graph(root: &Arc<Package>) -> String {
    fn visit(pkg: &Arc<Package>, ids: &mut HashMap<*const Package, usize>, s: &mut String) -> usize {
        let key = Arc::as_ptr(pkg);
        if let Some(id) = ids.get(&key) {
            return *id;
        }
        let id = ids.len();
        ids.insert(key, id);
        writeln!(s, "  n{id} [label={:?}];", pkg.full_name()).expect("write to string");
        for input in &pkg.inputs {
            let to = visit(&input.package, ids, s);
            writeln!(s, "  n{id} -> n{to} [label={:?}];", input.label).expect("write to string");
        }
        id
    }
    let mut s = format!("digraph {:?} {{\n", root.full_name());
    visit(root, &mut HashMap::new(), &mut s);
    s.push_str("}\n");
    s
}

/// Maps an error to its exit status and prints it.
pub fn report_error(e: &anyhow::Error) -> ExitCode {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        msg = format!("{cause} ({msg})");
    }
    eprintln!("hermit: {msg}");
    if e.chain().any(|c| c.is::<UsageError>()) {
        ExitCode::from(USAGE_EXIT)
    } else {
        ExitCode::FAILURE
    }
}
