//! Builder execution with a scrubbed environment.
//!
//! There is no kernel isolation here. A builder sees exactly the variables
//! of its derivation plus a few fixed ones, runs in a fresh directory, and
//! finds on `PATH` only the `bin` directories of its inputs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Seek, Write};
use std::os::unix::fs::{symlink, PermissionsExt};
use std::path::{Component, Path, PathBuf};
use std::process::{Command, Stdio};

use sha2::{Digest, Sha256};

use crate::archive;
use crate::base32;
use crate::deriv::{Builder, Derivation, UnionEntry};
use crate::store::copy_tree;

pub const HOMELESS: &str = "/homeless-shelter";
pub const SOURCE_DATE_EPOCH: &str = "1";

/// Name of the manifest a union item carries.
pub const UNION_MANIFEST: &str = ".hermit-manifest";
/// Paths a union entry lost to an earlier entry.
pub const UNION_CONFLICTS: &str = ".hermit-conflicts";

pub struct Sandbox {
    pub build_dir: PathBuf,
    /// The only environment the builder gets.
    pub env: BTreeMap<String, String>,
    /// Where the builder must leave its output (rendered and on disk).
    pub out: PathBuf,
    pub log: Vec<u8>,
}

/// Variables a builder for `drv` sees when building into `out`.
pub fn exact_env(drv: &Derivation, build_dir: &Path, out: &str) -> BTreeMap<String, String> {
    let mut env = drv.env.clone();
    env.insert("TMPDIR".into(), build_dir.display().to_string());
    env.insert("HOME".into(), HOMELESS.into());
    env.insert("SOURCE_DATE_EPOCH".into(), SOURCE_DATE_EPOCH.into());
    env.insert("out".into(), out.to_string());
    env
}

impl Sandbox {
    pub fn new(drv: &Derivation, out: &Path) -> std::io::Result<Self> {
        let build_dir = tempfile::Builder::new()
            .prefix(&format!("hermit-build-{}-", drv.name))
            .tempdir()?
            .keep();
        let env = exact_env(drv, &build_dir, &out.display().to_string());
        Ok(Self {
            build_dir,
            env,
            out: out.to_path_buf(),
            log: Vec::new(),
        })
    }

    fn note(&mut self, msg: &str) {
        self.log.extend_from_slice(msg.as_bytes());
        self.log.push(b'\n');
    }

    /// Removes the build directory (done after a successful build).
    pub fn discard(self) {
        let _ = crate::store::remove_tree(&self.build_dir);
    }
}

/// How a builder run ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Exit {
    Success,
    Failure(String),
}

pub fn execute_builder(drv: &Derivation, sandbox: &mut Sandbox) -> Exit {
    let result = match drv.builder {
        Builder::Fetch => fetch(drv, sandbox),
        Builder::WriteFiles => write_files(drv, sandbox),
        Builder::Union => union(drv, sandbox),
        Builder::Exec => exec(drv, sandbox),
    };
    let exit = match result {
        Ok(()) if fs::symlink_metadata(&sandbox.out).is_err() => {
            Exit::Failure("builder did not produce its output".into())
        }
        Ok(()) => Exit::Success,
        Err(msg) => Exit::Failure(msg),
    };
    if let Exit::Failure(msg) = &exit {
        sandbox.note(&format!("error: {msg}"));
    }
    exit
}

fn arg(drv: &Derivation, i: usize) -> Result<&str, String> {
    drv.args
        .get(i)
        .map(String::as_str)
        .ok_or_else(|| format!("{} expects argument {}", drv.builder, i + 1))
}

fn fetch(drv: &Derivation, sb: &mut Sandbox) -> Result<(), String> {
    let uri = arg(drv, 0)?;
    let src = PathBuf::from(uri.strip_prefix("file://").unwrap_or(uri));
    let fixed = drv.fixed.as_ref().ok_or("fetch without a declared hash")?;
    let meta = fs::metadata(&src).map_err(|e| format!("cannot fetch {uri}: {e}"))?;
    // Plain files hash flat; directories hash their canonical archive.
    let digest = if meta.is_dir() {
        let bytes = archive::dump_path(&src).map_err(|e| e.to_string())?;
        Sha256::digest(&bytes)
    } else {
        let bytes = fs::read(&src).map_err(|e| format!("cannot read {}: {e}", src.display()))?;
        Sha256::digest(&bytes)
    };
    let actual = base32::encode(&digest);
    if actual != fixed.digest {
        return Err(format!(
            "hash mismatch for {uri}: expected sha256 {}, got {actual}",
            fixed.digest
        ));
    }
    copy_tree(&src, &sb.out).map_err(|e| e.to_string())?;
    sb.note(&format!("fetched {uri} ({actual})"));
    Ok(())
}

fn relative(p: &str) -> Result<PathBuf, String> {
    let path = Path::new(p);
    if p.is_empty() || !path.components().all(|c| matches!(c, Component::Normal(_))) {
        return Err(format!("manifest path `{p}` must be relative and stay inside the output"));
    }
    Ok(path.to_path_buf())
}

fn write_files(drv: &Derivation, sb: &mut Sandbox) -> Result<(), String> {
    let manifest = arg(drv, 0)?;
    let text = fs::read(manifest).map_err(|e| format!("cannot read {manifest}: {e}"))?;
    let triples: Vec<[String; 3]> =
        serde_json::from_slice(&text).map_err(|e| format!("bad file manifest {manifest}: {e}"))?;
    fs::create_dir(&sb.out).map_err(|e| e.to_string())?;
    for [path, mode, content] in triples {
        let rel = relative(&path)?;
        let mode = u32::from_str_radix(&mode, 8).map_err(|_| format!("bad mode `{mode}` for {path}"))?;
        let dest = sb.out.join(&rel);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).map_err(|e| e.to_string())?;
        }
        fs::write(&dest, content.as_bytes()).map_err(|e| format!("{}: {e}", dest.display()))?;
        let perm = if mode & 0o111 != 0 { 0o755 } else { 0o644 };
        fs::set_permissions(&dest, fs::Permissions::from_mode(perm)).map_err(|e| e.to_string())?;
        sb.note(&format!("wrote {path}"));
    }
    Ok(())
}

/// Links `src` (a rendered path) at `dest`, merging directories. Entries
/// that already exist are conflicts and keep the earlier owner.
fn link_tree(src: &Path, dest: &Path, rel: &Path, conflicts: &mut Vec<String>) -> Result<(), String> {
    let src_meta = fs::symlink_metadata(src).map_err(|e| format!("{}: {e}", src.display()))?;
    match fs::symlink_metadata(dest) {
        Err(_) => return symlink(src, dest).map_err(|e| format!("{}: {e}", dest.display())),
        Ok(m) if src_meta.is_dir() => {
            let existing_dir = if m.file_type().is_symlink() {
                fs::metadata(dest).map(|t| t.is_dir()).unwrap_or(false)
            } else {
                m.is_dir()
            };
            if existing_dir {
                if m.file_type().is_symlink() {
                    // Expand a linked directory so two entries can share it.
                    let previous = fs::read_link(dest).map_err(|e| e.to_string())?;
                    fs::remove_file(dest).map_err(|e| e.to_string())?;
                    fs::create_dir(dest).map_err(|e| e.to_string())?;
                    let mut names: Vec<_> = fs::read_dir(&previous)
                        .map_err(|e| e.to_string())?
                        .flatten()
                        .map(|e| e.file_name())
                        .collect();
                    names.sort();
                    for n in names {
                        link_tree(&previous.join(&n), &dest.join(&n), &rel.join(&n), conflicts)?;
                    }
                }
                let mut names: Vec<_> = fs::read_dir(src)
                    .map_err(|e| e.to_string())?
                    .flatten()
                    .map(|e| e.file_name())
                    .collect();
                names.sort();
                for n in names {
                    link_tree(&src.join(&n), &dest.join(&n), &rel.join(&n), conflicts)?;
                }
                return Ok(());
            }
        }
        Ok(_) => {}
    }
    conflicts.push(format!("{}\t{}", rel.display(), src.display()));
    Ok(())
}

fn union(drv: &Derivation, sb: &mut Sandbox) -> Result<(), String> {
    let manifest = drv.env.get("manifest").cloned().unwrap_or_else(|| "[]".into());
    let entries: Vec<UnionEntry> = serde_json::from_str(&manifest).map_err(|e| format!("bad union manifest: {e}"))?;
    fs::create_dir(&sb.out).map_err(|e| e.to_string())?;
    let mut conflicts = Vec::new();
    for input in &drv.args {
        let src = Path::new(input);
        let meta = fs::metadata(src).map_err(|e| format!("{input}: {e}"))?;
        if !meta.is_dir() {
            sb.note(&format!("skipping {input}: not a directory"));
            continue;
        }
        let mut names: Vec<_> = fs::read_dir(src)
            .map_err(|e| e.to_string())?
            .flatten()
            .map(|e| e.file_name())
            .collect();
        names.sort();
        for n in names {
            if n == UNION_MANIFEST || n == UNION_CONFLICTS {
                continue;
            }
            link_tree(&src.join(&n), &sb.out.join(&n), Path::new(&n), &mut conflicts)?;
        }
    }
    let mut text = serde_json::to_string_pretty(&entries).map_err(|e| e.to_string())?;
    text.push('\n');
    fs::write(sb.out.join(UNION_MANIFEST), text).map_err(|e| e.to_string())?;
    let mut listing = conflicts.join("\n");
    if !listing.is_empty() {
        listing.push('\n');
    }
    fs::write(sb.out.join(UNION_CONFLICTS), listing).map_err(|e| e.to_string())?;
    sb.note(&format!("union of {} entries, {} conflicts", drv.args.len(), conflicts.len()));
    Ok(())
}

fn exec(drv: &Derivation, sb: &mut Sandbox) -> Result<(), String> {
    let program = arg(drv, 0)?;
    let mut log = tempfile::tempfile().map_err(|e| e.to_string())?;
    let out = log.try_clone().map_err(|e| e.to_string())?;
    let err = log.try_clone().map_err(|e| e.to_string())?;
    let status = Command::new(program)
        .args(&drv.args[1..])
        .env_clear()
        .envs(&sb.env)
        .current_dir(&sb.build_dir)
        .stdin(Stdio::null())
        .stdout(out)
        .stderr(err)
        .status()
        .map_err(|e| format!("cannot run {program}: {e}"));
    let mut captured = Vec::new();
    log.flush().ok();
    log.rewind().ok();
    log.read_to_end(&mut captured).ok();
    sb.log.extend_from_slice(&captured);
    let status = status?;
    if !status.success() {
        return Err(format!("builder {status}"));
    }
    Ok(())
}
