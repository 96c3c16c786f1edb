//! Canonical archives of filesystem objects and closure export streams.
//!
//! Archive grammar (integers are 8-byte little-endian):
//!
//! ```text
//! archive := "HERMITAR1" object
//! object  := "F" exec:u8 len content | "S" len target | "D" count entry*
//! entry   := len name object          ; entries sorted by name bytes
//! ```
//!
//! An export stream is `"HERMITEXP1"`, one `"R"` record per item in
//! dependency order, then `"E" count sha256` where the hash covers every
//! byte before it.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsStr;
use std::fs;
use std::io::{self, Read, Write};
use std::os::unix::ffi::OsStrExt;
use std::os::unix::fs::{symlink, PermissionsExt};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::canon;
use crate::store::{sha256_hex, ItemRecord, Store, StoreError, StorePath};

pub const ARCHIVE_MAGIC: &[u8] = b"HERMITAR1";
pub const EXPORT_MAGIC: &[u8] = b"HERMITEXP1";

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("special file not allowed in the store: {}", .0.display())]
    SpecialFile(PathBuf),
    #[error("hard-linked file not allowed in the store: {}", .0.display())]
    HardLink(PathBuf),
    #[error("malformed archive: {0}")]
    Malformed(String),
    #[error("export stream is truncated or its checksum does not match")]
    ChecksumMismatch,
    #[error("malformed export stream: {0}")]
    MalformedStream(String),
    #[error("content digest mismatch for {path}: expected {expected}, got {actual}")]
    DigestMismatch {
        path: String,
        expected: String,
        actual: String,
    },
    #[error("{path} references {missing}, which is neither valid nor earlier in the stream")]
    MissingReference { path: String, missing: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ArchiveError + '_ {
    move |source| ArchiveError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn put_u64(out: &mut Vec<u8>, n: u64) {
    out.extend_from_slice(&n.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

/// Canonical archive bytes of the object at `path`.
pub fn dump_path(path: &Path) -> Result<Vec<u8>, ArchiveError> {
    let mut out = ARCHIVE_MAGIC.to_vec();
    write_object(path, &mut out)?;
    Ok(out)
}

/// Archive of a lone regular file.
pub fn file_archive(contents: &[u8], executable: bool) -> Vec<u8> {
    let mut out = ARCHIVE_MAGIC.to_vec();
    out.push(b'F');
    out.push(executable as u8);
    put_bytes(&mut out, contents);
    out
}

fn write_object(path: &Path, out: &mut Vec<u8>) -> Result<(), ArchiveError> {
    let meta = fs::symlink_metadata(path).map_err(io_err(path))?;
    let ft = meta.file_type();
    if ft.is_symlink() {
        let target = fs::read_link(path).map_err(io_err(path))?;
        out.push(b'S');
        put_bytes(out, target.as_os_str().as_bytes());
    } else if ft.is_file() {
        let data = fs::read(path).map_err(io_err(path))?;
        out.push(b'F');
        out.push((meta.permissions().mode() & 0o111 != 0) as u8);
        put_bytes(out, &data);
    } else if ft.is_dir() {
        let mut names: Vec<Vec<u8>> = fs::read_dir(path)
            .map_err(io_err(path))?
            .map(|e| e.map(|e| e.file_name().as_bytes().to_vec()))
            .collect::<Result<_, _>>()
            .map_err(io_err(path))?;
        names.sort();
        out.push(b'D');
        put_u64(out, names.len() as u64);
        for name in names {
            put_bytes(out, &name);
            write_object(&path.join(OsStr::from_bytes(&name)), out)?;
        }
    } else {
        return Err(ArchiveError::SpecialFile(path.to_path_buf()));
    }
    Ok(())
}

/// A parsed archive object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    File { executable: bool, contents: Vec<u8> },
    Symlink { target: Vec<u8> },
    Directory(Vec<(Vec<u8>, Node)>),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ArchiveError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ArchiveError::Malformed(format!("unexpected end at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn byte(&mut self) -> Result<u8, ArchiveError> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64, ArchiveError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8], ArchiveError> {
        let n = self.u64()?;
        let n = usize::try_from(n).map_err(|_| ArchiveError::Malformed("length overflow".into()))?;
        self.take(n)
    }

    fn object(&mut self, depth: usize) -> Result<Node, ArchiveError> {
        if depth > 256 {
            return Err(ArchiveError::Malformed("nesting too deep".into()));
        }
        match self.byte()? {
            b'F' => {
                let executable = match self.byte()? {
                    0 => false,
                    1 => true,
                    x => return Err(ArchiveError::Malformed(format!("bad exec flag {x}"))),
                };
                Ok(Node::File {
                    executable,
                    contents: self.bytes()?.to_vec(),
                })
            }
            b'S' => Ok(Node::Symlink {
                target: self.bytes()?.to_vec(),
            }),
            b'D' => {
                let count = self.u64()?;
                let mut entries: Vec<(Vec<u8>, Node)> = Vec::new();
                for _ in 0..count {
                    let name = self.bytes()?.to_vec();
                    if name.is_empty() || name == b"." || name == b".." || name.contains(&b'/') || name.contains(&0) {
                        return Err(ArchiveError::Malformed(format!(
                            "bad entry name {:?}",
                            String::from_utf8_lossy(&name)
                        )));
                    }
                    if let Some((prev, _)) = entries.last() {
                        if *prev >= name {
                            return Err(ArchiveError::Malformed("entries not strictly sorted".into()));
                        }
                    }
                    let node = self.object(depth + 1)?;
                    entries.push((name, node));
                }
                Ok(Node::Directory(entries))
            }
            t => Err(ArchiveError::Malformed(format!("unknown object tag {t:#04x}"))),
        }
    }
}

pub fn parse(bytes: &[u8]) -> Result<Node, ArchiveError> {
    let rest = bytes
        .strip_prefix(ARCHIVE_MAGIC)
        .ok_or_else(|| ArchiveError::Malformed("missing magic".into()))?;
    let mut r = Reader { buf: rest, pos: 0 };
    let node = r.object(0)?;
    if r.pos != rest.len() {
        return Err(ArchiveError::Malformed("trailing bytes".into()));
    }
    Ok(node)
}

/// Materializes archive bytes at `dest`, which must not exist.
pub fn restore(bytes: &[u8], dest: &Path) -> Result<(), ArchiveError> {
    materialize(&parse(bytes)?, dest)
}

fn materialize(node: &Node, dest: &Path) -> Result<(), ArchiveError> {
    match node {
        Node::File { executable, contents } => {
            fs::write(dest, contents).map_err(io_err(dest))?;
            let mode = if *executable { 0o755 } else { 0o644 };
            fs::set_permissions(dest, fs::Permissions::from_mode(mode)).map_err(io_err(dest))?;
        }
        Node::Symlink { target } => {
            symlink(OsStr::from_bytes(target), dest).map_err(io_err(dest))?;
        }
        Node::Directory(entries) => {
            fs::create_dir(dest).map_err(io_err(dest))?;
            for (name, child) in entries {
                materialize(child, &dest.join(OsStr::from_bytes(name)))?;
            }
        }
    }
    Ok(())
}

fn flatten(node: &Node, prefix: Vec<Vec<u8>>, out: &mut BTreeMap<Vec<Vec<u8>>, String>) {
    let desc = match node {
        Node::File { executable, contents } => format!(
            "{} file, {} bytes, sha256 {}",
            if *executable { "executable" } else { "regular" },
            contents.len(),
            sha256_hex(contents)
        ),
        Node::Symlink { target } => format!("symlink to {}", String::from_utf8_lossy(target)),
        Node::Directory(_) => "directory".to_string(),
    };
    if let Node::Directory(entries) = node {
        for (name, child) in entries {
            let mut p = prefix.clone();
            p.push(name.clone());
            flatten(child, p, out);
        }
    }
    out.insert(prefix, desc);
}

/// Describes the first entry (in archive order) where two archives differ.
pub fn first_difference(a: &[u8], b: &[u8]) -> Option<String> {
    if a == b {
        return None;
    }
    let (Ok(na), Ok(nb)) = (parse(a), parse(b)) else {
        return Some("archives are not comparable".to_string());
    };
    let mut fa = BTreeMap::new();
    let mut fb = BTreeMap::new();
    flatten(&na, Vec::new(), &mut fa);
    flatten(&nb, Vec::new(), &mut fb);
    let keys: BTreeSet<&Vec<Vec<u8>>> = fa.keys().chain(fb.keys()).collect();
    for key in keys {
        let (x, y) = (fa.get(key), fb.get(key));
        if x != y {
            let path = if key.is_empty() {
                ".".to_string()
            } else {
                key.iter().map(|c| String::from_utf8_lossy(c)).collect::<Vec<_>>().join("/")
            };
            return Some(format!(
                "{path}: {} vs {}",
                x.map(String::as_str).unwrap_or("absent"),
                y.map(String::as_str).unwrap_or("absent")
            ));
        }
    }
    Some(".: contents differ".to_string())
}

/// Writes `closure(roots)` as an export stream.
pub fn export_closure(store: &Store, roots: &[StorePath], sink: &mut dyn Write) -> Result<usize, crate::Error> {
    let _guard = store.gc_guard()?;
    let order = store.closure(roots)?;
    let items: BTreeMap<StorePath, ItemRecord> = store
        .valid_items()?
        .into_iter()
        .map(|r| (r.path.clone(), r))
        .collect();
    let mut hasher = Sha256::new();
    let mut emit = |bytes: &[u8], sink: &mut dyn Write| -> Result<(), crate::Error> {
        hasher.update(bytes);
        sink.write_all(bytes).map_err(|e| crate::Error::Io(e.to_string()))
    };
    emit(EXPORT_MAGIC, sink)?;
    for path in &order {
        let rec = &items[path];
        let archive = store.item_archive_bytes(path)?;
        let actual = sha256_hex(&archive);
        if actual != rec.content_digest {
            return Err(ArchiveError::DigestMismatch {
                path: store.render(path),
                expected: rec.content_digest.clone(),
                actual,
            }
            .into());
        }
        let mut buf = vec![b'R'];
        put_bytes(&mut buf, store.render(path).as_bytes());
        put_u64(&mut buf, rec.references.len() as u64);
        for r in &rec.references {
            put_bytes(&mut buf, store.render(r).as_bytes());
        }
        put_bytes(&mut buf, rec.deriver.as_deref().unwrap_or("-").as_bytes());
        put_bytes(&mut buf, rec.content_digest.as_bytes());
        emit(&buf, sink)?;
        let mut len = Vec::with_capacity(8);
        put_u64(&mut len, archive.len() as u64);
        emit(&len, sink)?;
        emit(&archive, sink)?;
    }
    let mut trailer = vec![b'E'];
    put_u64(&mut trailer, order.len() as u64);
    emit(&trailer, sink)?;
    let sum = hasher.finalize();
    sink.write_all(&sum).map_err(|e| crate::Error::Io(e.to_string()))?;
    Ok(order.len())
}

/// One record of an export stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportRecord {
    pub path: String,
    pub references: Vec<String>,
    pub deriver: Option<String>,
    pub content_digest: String,
    pub archive: Vec<u8>,
}

/// Checks the trailer and splits a stream into its records.
pub fn parse_stream(bytes: &[u8]) -> Result<Vec<ExportRecord>, ArchiveError> {
    if bytes.len() < EXPORT_MAGIC.len() + 1 + 8 + 32 {
        return Err(ArchiveError::ChecksumMismatch);
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(ArchiveError::ChecksumMismatch);
    }
    let rest = body
        .strip_prefix(EXPORT_MAGIC)
        .ok_or_else(|| ArchiveError::MalformedStream("missing header".into()))?;
    let mut r = Reader { buf: rest, pos: 0 };
    let malformed = |e: ArchiveError| ArchiveError::MalformedStream(e.to_string());
    let text = |b: &[u8]| {
        String::from_utf8(b.to_vec()).map_err(|_| ArchiveError::MalformedStream("non-UTF-8 string".into()))
    };
    let mut records = Vec::new();
    loop {
        match r.byte().map_err(malformed)? {
            b'R' => {
                let path = text(r.bytes().map_err(malformed)?)?;
                let n = r.u64().map_err(malformed)?;
                let mut references = Vec::new();
                for _ in 0..n {
                    references.push(text(r.bytes().map_err(malformed)?)?);
                }
                let deriver = text(r.bytes().map_err(malformed)?)?;
                let content_digest = text(r.bytes().map_err(malformed)?)?;
                let archive = r.bytes().map_err(malformed)?.to_vec();
                records.push(ExportRecord {
                    path,
                    references,
                    deriver: (deriver != "-").then_some(deriver),
                    content_digest,
                    archive,
                });
            }
            b'E' => {
                let count = r.u64().map_err(malformed)?;
                if count != records.len() as u64 {
                    return Err(ArchiveError::MalformedStream(format!(
                        "trailer counts {count} records, stream has {}",
                        records.len()
                    )));
                }
                if r.pos != rest.len() {
                    return Err(ArchiveError::MalformedStream("bytes after trailer".into()));
                }
                return Ok(records);
            }
            t => return Err(ArchiveError::MalformedStream(format!("unknown record tag {t:#04x}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImportReport {
    /// Every path in the stream, in stream order.
    pub paths: Vec<StorePath>,
    /// The subset that was not valid before and got registered.
    pub registered: Vec<StorePath>,
}

/// Verifies and registers every record of an export stream.
pub fn import_stream(store: &Store, source: &mut dyn Read) -> Result<ImportReport, crate::Error> {
    let mut bytes = Vec::new();
    source
        .read_to_end(&mut bytes)
        .map_err(|e| crate::Error::Io(e.to_string()))?;
    let records = parse_stream(&bytes)?;
    let config = store.config().clone();
    let _guard = store.gc_guard()?;
    let mut report = ImportReport::default();
    let mut seen: BTreeSet<StorePath> = BTreeSet::new();
    for rec in records {
        let path = config.parse_rendered(&rec.path)?;
        let actual = sha256_hex(&rec.archive);
        if actual != rec.content_digest {
            return Err(ArchiveError::DigestMismatch {
                path: rec.path,
                expected: rec.content_digest,
                actual,
            }
            .into());
        }
        let mut references = BTreeSet::new();
        for r in &rec.references {
            let rp = config.parse_rendered(r)?;
            if rp != path && !seen.contains(&rp) && !store.is_valid(&rp)? {
                return Err(ArchiveError::MissingReference {
                    path: rec.path.clone(),
                    missing: r.clone(),
                }
                .into());
            }
            references.insert(rp);
        }
        let _lock = store.lock_item(&path)?;
        if let Some(existing) = store.query(&path)? {
            if existing.content_digest != rec.content_digest {
                return Err(StoreError::Collision {
                    path: rec.path,
                    existing: existing.content_digest,
                    new: rec.content_digest,
                }
                .into());
            }
        } else {
            let staging = store.stage()?;
            let obj = staging.object();
            restore(&rec.archive, &obj)?;
            canon::canonicalize(&obj)?;
            store.install(&obj, &path)?;
            store.register(vec![ItemRecord {
                path: path.clone(),
                content_digest: rec.content_digest,
                references,
                deriver: rec.deriver,
                registered_at: 0,
            }])?;
            report.registered.push(path.clone());
        }
        seen.insert(path.clone());
        report.paths.push(path);
    }
    Ok(report)
}
