//! Wire format between store clients and the daemon.
//!
//! A frame is a 4-byte little-endian length, then one opcode byte, then the
//! payload; the length counts the opcode and the payload. Payload integers
//! are 8-byte little-endian and strings are prefixed by their 8-byte length.
//! Store paths travel as base names, so they do not depend on where either
//! side thinks the store lives.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Read, Write};

use hermit_core::archive::ImportReport;
use hermit_core::build::{BuildError, BuildResult, BuildStatus, Realization, RealizeOptions};
use hermit_core::deriv::DerivationGraph;
use hermit_core::ops::RootKind;
use hermit_core::store::{GcReport, StorePath};

pub const PROTOCOL_VERSION: &str = "1";
pub const MAX_FRAME: usize = 64 << 20;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("empty frame")]
    Empty,
    #[error("unknown opcode {0:#04x}")]
    UnknownOpcode(u8),
    #[error("malformed payload: {0}")]
    Malformed(String),
}

type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub opcode: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let len = self.payload.len() + 1;
        if len > MAX_FRAME {
            return Err(ProtocolError::TooLarge(len));
        }
        let mut out = Vec::with_capacity(len + 4);
        out.extend_from_slice(&(len as u32).to_le_bytes());
        out.push(self.opcode);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Body length announced by a frame header.
    pub fn body_len(header: [u8; 4]) -> Result<usize> {
        let len = u32::from_le_bytes(header) as usize;
        if len == 0 {
            return Err(ProtocolError::Empty);
        }
        if len > MAX_FRAME {
            return Err(ProtocolError::TooLarge(len));
        }
        Ok(len)
    }

    /// Frame from a body (opcode plus payload).
    pub fn from_body(mut body: Vec<u8>) -> Result<Self> {
        if body.is_empty() {
            return Err(ProtocolError::Empty);
        }
        let opcode = body.remove(0);
        Ok(Self { opcode, payload: body })
    }
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<()> {
    w.write_all(&frame.to_bytes()?)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame(r: &mut impl Read) -> Result<Frame> {
    let mut header = [0u8; 4];
    r.read_exact(&mut header)?;
    let len = Frame::body_len(header)?;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Frame::from_body(body)
}

/// Payload builder.
#[derive(Default)]
pub struct Encoder(Vec<u8>);

impl Encoder {
    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.0.push(v);
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn opt_str(&mut self, s: Option<&str>) -> &mut Self {
        match s {
            Some(s) => self.u8(1).str(s),
            None => self.u8(0),
        }
    }

    pub fn strs<'a>(&mut self, items: impl ExactSizeIterator<Item = &'a str>) -> &mut Self {
        self.u64(items.len() as u64);
        for s in items {
            self.str(s);
        }
        self
    }

    pub fn path(&mut self, p: &StorePath) -> &mut Self {
        self.str(&p.base_name())
    }

    pub fn paths<'a>(&mut self, items: impl ExactSizeIterator<Item = &'a StorePath>) -> &mut Self {
        self.u64(items.len() as u64);
        for p in items {
            self.path(p);
        }
        self
    }

    pub fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.0)
    }
}

/// Payload reader; every accessor fails on truncation.
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ProtocolError::Malformed("truncated payload".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn count(&mut self) -> Result<usize> {
        let n = self.u64()?;
        // Each element needs at least one byte, which bounds bogus counts.
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(ProtocolError::Malformed(format!("count {n} exceeds payload")));
        }
        Ok(n as usize)
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u64()?;
        let n = usize::try_from(n).map_err(|_| ProtocolError::Malformed("length overflow".into()))?;
        Ok(self.take(n)?.to_vec())
    }

    pub fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?).map_err(|_| ProtocolError::Malformed("string is not UTF-8".into()))
    }

    pub fn opt_str(&mut self) -> Result<Option<String>> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.str()?)),
            t => Err(ProtocolError::Malformed(format!("bad option tag {t}"))),
        }
    }

    pub fn strs(&mut self) -> Result<Vec<String>> {
        let n = self.count()?;
        (0..n).map(|_| self.str()).collect()
    }

    pub fn path(&mut self) -> Result<StorePath> {
        let s = self.str()?;
        StorePath::from_base_name(&s).map_err(|e| ProtocolError::Malformed(e.to_string()))
    }

    pub fn paths(&mut self) -> Result<Vec<StorePath>> {
        let n = self.count()?;
        (0..n).map(|_| self.path()).collect()
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(ProtocolError::Malformed(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

mod op {
    pub const HELLO: u8 = 0x01;
    pub const PING: u8 = 0x02;
    pub const ADD_CONTENT: u8 = 0x03;
    pub const REALIZE: u8 = 0x04;
    pub const QUERY_VALID: u8 = 0x05;
    pub const QUERY_REFS: u8 = 0x06;
    pub const CLOSURE: u8 = 0x07;
    pub const ADD_ROOT: u8 = 0x08;
    pub const REMOVE_ROOT: u8 = 0x09;
    pub const GC: u8 = 0x0a;
    pub const EXPORT: u8 = 0x0b;
    pub const IMPORT: u8 = 0x0c;
    pub const STATS: u8 = 0x0d;

    pub const WELCOME: u8 = 0x81;
    pub const PONG: u8 = 0x82;
    pub const PATH: u8 = 0x83;
    pub const BOOL: u8 = 0x84;
    pub const PATHS: u8 = 0x85;
    pub const NAME: u8 = 0x86;
    pub const UNIT: u8 = 0x87;
    pub const GC_REPORT: u8 = 0x88;
    pub const EXPORTED: u8 = 0x89;
    pub const IMPORTED: u8 = 0x8a;
    pub const REALIZED: u8 = 0x8b;
    pub const STATS_REPLY: u8 = 0x8c;
    pub const ERROR: u8 = 0xff;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Hello { version: String },
    Ping,
    /// Adds the object described by a canonical archive.
    AddContent { name: String, archive: Vec<u8> },
    Realize { graph: DerivationGraph, options: RealizeOptions },
    QueryValid(StorePath),
    QueryRefs(StorePath),
    Closure(Vec<StorePath>),
    AddRoot { name: String, target: String, kind: RootKind },
    RemoveRoot(String),
    Gc,
    Export(Vec<StorePath>),
    Import(Vec<u8>),
    /// Instrumentation counters.
    Stats,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Welcome {
        version: String,
        logical_root: String,
        physical_root: String,
        bootstrap: StorePath,
    },
    Pong { version: String },
    Path(StorePath),
    Bool(bool),
    Paths(Vec<StorePath>),
    Name(String),
    Unit,
    Gc(GcReport),
    Exported { count: u64, stream: Vec<u8> },
    Imported(ImportReport),
    Realized(Realization),
    Stats { spawns: u64 },
    Error { kind: String, message: String },
}

fn encode_graph(e: &mut Encoder, g: &DerivationGraph) {
    e.str(&g.root);
    let texts = g.texts();
    e.strs(texts.iter().map(String::as_str));
    e.u64(g.sources.len() as u64);
    for (p, bytes) in &g.sources {
        e.path(p).bytes(bytes);
    }
}

fn decode_graph(d: &mut Decoder) -> Result<DerivationGraph> {
    let root = d.str()?;
    let texts = d.strs()?;
    let n = d.count()?;
    let mut sources = BTreeMap::new();
    for _ in 0..n {
        let p = d.path()?;
        sources.insert(p, d.bytes()?);
    }
    DerivationGraph::from_texts(&root, &texts, sources).map_err(|e| ProtocolError::Malformed(e.to_string()))
}

fn encode_build_error(e: &mut Encoder, err: &BuildError) {
    match err {
        BuildError::Builder {
            path,
            reason,
            log,
            build_dir,
        } => e.u8(1).str(path).str(reason).str(log).opt_str(build_dir.as_deref()),
        BuildError::Dependency { path, dependency } => e.u8(2).str(path).str(dependency),
        BuildError::NonDeterministic { path, difference } => e.u8(3).str(path).str(difference),
        BuildError::Output { path, message } => e.u8(4).str(path).str(message),
        BuildError::MissingInput { path, input } => e.u8(5).str(path).str(input),
        BuildError::Internal(m) => e.u8(6).str(m),
    };
}

fn decode_build_error(d: &mut Decoder, tag: u8) -> Result<BuildError> {
    Ok(match tag {
        1 => BuildError::Builder {
            path: d.str()?,
            reason: d.str()?,
            log: d.str()?,
            build_dir: d.opt_str()?,
        },
        2 => BuildError::Dependency {
            path: d.str()?,
            dependency: d.str()?,
        },
        3 => BuildError::NonDeterministic {
            path: d.str()?,
            difference: d.str()?,
        },
        4 => BuildError::Output {
            path: d.str()?,
            message: d.str()?,
        },
        5 => BuildError::MissingInput {
            path: d.str()?,
            input: d.str()?,
        },
        6 => BuildError::Internal(d.str()?),
        t => return Err(ProtocolError::Malformed(format!("bad build error tag {t}"))),
    })
}

fn status_byte(s: BuildStatus) -> u8 {
    match s {
        BuildStatus::Built => 0,
        BuildStatus::Cached => 1,
        BuildStatus::Failed => 2,
    }
}

fn encode_realization(e: &mut Encoder, r: &Realization) {
    e.str(&r.root);
    e.u64(r.results.len() as u64);
    for (digest, res) in &r.results {
        e.str(digest).path(&res.path).u8(status_byte(res.status)).bytes(&res.log);
        e.paths(res.references.iter());
        match &res.error {
            Some(err) => encode_build_error(e, err),
            None => {
                e.u8(0);
            }
        }
    }
}

fn decode_realization(d: &mut Decoder) -> Result<Realization> {
    let root = d.str()?;
    let n = d.count()?;
    let mut results = BTreeMap::new();
    for _ in 0..n {
        let digest = d.str()?;
        let path = d.path()?;
        let status = match d.u8()? {
            0 => BuildStatus::Built,
            1 => BuildStatus::Cached,
            2 => BuildStatus::Failed,
            t => return Err(ProtocolError::Malformed(format!("bad status {t}"))),
        };
        let log = d.bytes()?;
        let references: BTreeSet<StorePath> = d.paths()?.into_iter().collect();
        let error = match d.u8()? {
            0 => None,
            tag => Some(decode_build_error(d, tag)?),
        };
        results.insert(
            digest,
            BuildResult {
                path,
                status,
                log,
                references,
                error,
            },
        );
    }
    if !results.contains_key(&root) {
        return Err(ProtocolError::Malformed("realization lacks its root".into()));
    }
    Ok(Realization { root, results })
}

impl Request {
    pub fn encode(&self) -> Frame {
        let mut e = Encoder::default();
        let opcode = match self {
            Request::Hello { version } => {
                e.str(version);
                op::HELLO
            }
            Request::Ping => op::PING,
            Request::AddContent { name, archive } => {
                e.str(name).bytes(archive);
                op::ADD_CONTENT
            }
            Request::Realize { graph, options } => {
                encode_graph(&mut e, graph);
                e.u8(options.check as u8).u64(options.jobs as u64);
                op::REALIZE
            }
            Request::QueryValid(p) => {
                e.path(p);
                op::QUERY_VALID
            }
            Request::QueryRefs(p) => {
                e.path(p);
                op::QUERY_REFS
            }
            Request::Closure(ps) => {
                e.paths(ps.iter());
                op::CLOSURE
            }
            Request::AddRoot { name, target, kind } => {
                e.str(name).str(target).u8(kind.as_u8());
                op::ADD_ROOT
            }
            Request::RemoveRoot(name) => {
                e.str(name);
                op::REMOVE_ROOT
            }
            Request::Gc => op::GC,
            Request::Export(ps) => {
                e.paths(ps.iter());
                op::EXPORT
            }
            Request::Import(stream) => {
                e.bytes(stream);
                op::IMPORT
            }
            Request::Stats => op::STATS,
        };
        Frame {
            opcode,
            payload: e.finish(),
        }
    }

    pub fn decode(frame: &Frame) -> Result<Self> {
        let mut d = Decoder::new(&frame.payload);
        let req = match frame.opcode {
            op::HELLO => Request::Hello { version: d.str()? },
            op::PING => Request::Ping,
            op::ADD_CONTENT => Request::AddContent {
                name: d.str()?,
                archive: d.bytes()?,
            },
            op::REALIZE => {
                let graph = decode_graph(&mut d)?;
                let check = match d.u8()? {
                    0 => false,
                    1 => true,
                    t => return Err(ProtocolError::Malformed(format!("bad check flag {t}"))),
                };
                let jobs = usize::try_from(d.u64()?)
                    .ok()
                    .filter(|j| *j >= 1)
                    .ok_or_else(|| ProtocolError::Malformed("jobs must be at least 1".into()))?;
                Request::Realize {
                    graph,
                    options: RealizeOptions { check, jobs },
                }
            }
            op::QUERY_VALID => Request::QueryValid(d.path()?),
            op::QUERY_REFS => Request::QueryRefs(d.path()?),
            op::CLOSURE => Request::Closure(d.paths()?),
            op::ADD_ROOT => {
                let name = d.str()?;
                let target = d.str()?;
                let kind = d.u8()?;
                let kind =
                    RootKind::from_u8(kind).ok_or_else(|| ProtocolError::Malformed(format!("bad root kind {kind}")))?;
                Request::AddRoot { name, target, kind }
            }
            op::REMOVE_ROOT => Request::RemoveRoot(d.str()?),
            op::GC => Request::Gc,
            op::EXPORT => Request::Export(d.paths()?),
            op::IMPORT => Request::Import(d.bytes()?),
            op::STATS => Request::Stats,
            other => return Err(ProtocolError::UnknownOpcode(other)),
        };
        d.finish()?;
        Ok(req)
    }
}

impl Response {
    pub fn error(kind: &str, message: impl Into<String>) -> Self {
        Response::Error {
            kind: kind.to_string(),
            message: message.into(),
        }
    }

    pub fn encode(&self) -> Frame {
        let mut e = Encoder::default();
        let opcode = match self {
            Response::Welcome {
                version,
                logical_root,
                physical_root,
                bootstrap,
            } => {
                e.str(version).str(logical_root).str(physical_root).path(bootstrap);
                op::WELCOME
            }
            Response::Pong { version } => {
                e.str(version);
                op::PONG
            }
            Response::Path(p) => {
                e.path(p);
                op::PATH
            }
            Response::Bool(b) => {
                e.u8(*b as u8);
                op::BOOL
            }
            Response::Paths(ps) => {
                e.paths(ps.iter());
                op::PATHS
            }
            Response::Name(n) => {
                e.str(n);
                op::NAME
            }
            Response::Unit => op::UNIT,
            Response::Gc(r) => {
                e.paths(r.deleted.iter()).u64(r.freed_bytes).paths(r.skipped.iter());
                op::GC_REPORT
            }
            Response::Exported { count, stream } => {
                e.u64(*count).bytes(stream);
                op::EXPORTED
            }
            Response::Imported(r) => {
                e.paths(r.paths.iter()).paths(r.registered.iter());
                op::IMPORTED
            }
            Response::Realized(r) => {
                encode_realization(&mut e, r);
                op::REALIZED
            }
            Response::Stats { spawns } => {
                e.u64(*spawns);
                op::STATS_REPLY
            }
            Response::Error { kind, message } => {
                e.str(kind).str(message);
                op::ERROR
            }
        };
        Frame {
            opcode,
            payload: e.finish(),
        }
    }

    pub fn decode(frame: &Frame) -> Result<Self> {
        let mut d = Decoder::new(&frame.payload);
        let resp = match frame.opcode {
            op::WELCOME => Response::Welcome {
                version: d.str()?,
                logical_root: d.str()?,
                physical_root: d.str()?,
                bootstrap: d.path()?,
            },
            op::PONG => Response::Pong { version: d.str()? },
            op::PATH => Response::Path(d.path()?),
            op::BOOL => match d.u8()? {
                0 => Response::Bool(false),
                1 => Response::Bool(true),
                t => return Err(ProtocolError::Malformed(format!("bad boolean {t}"))),
            },
            op::PATHS => Response::Paths(d.paths()?),
            op::NAME => Response::Name(d.str()?),
            op::UNIT => Response::Unit,
            op::GC_REPORT => Response::Gc(GcReport {
                deleted: d.paths()?,
                freed_bytes: d.u64()?,
                skipped: d.paths()?,
            }),
            op::EXPORTED => Response::Exported {
                count: d.u64()?,
                stream: d.bytes()?,
            },
            op::IMPORTED => Response::Imported(ImportReport {
                paths: d.paths()?,
                registered: d.paths()?,
            }),
            op::REALIZED => Response::Realized(decode_realization(&mut d)?),
            op::STATS_REPLY => Response::Stats { spawns: d.u64()? },
            op::ERROR => Response::Error {
                kind: d.str()?,
                message: d.str()?,
            },
            other => return Err(ProtocolError::UnknownOpcode(other)),
        };
        d.finish()?;
        Ok(resp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_layout() {
        let f = Request::Ping.encode();
        assert_eq!(f.to_bytes().unwrap(), [1, 0, 0, 0, op::PING]);
        let f = Request::Hello { version: "1".into() }.encode();
        let bytes = f.to_bytes().unwrap();
        assert_eq!(&bytes[..5], [10, 0, 0, 0, op::HELLO]);
        assert_eq!(&bytes[5..13], 1u64.to_le_bytes());
        assert_eq!(&bytes[13..], b"1");
    }

    #[test]
    fn oversized_frames_are_refused() {
        let header = ((MAX_FRAME + 1) as u32).to_le_bytes();
        assert!(matches!(Frame::body_len(header), Err(ProtocolError::TooLarge(_))));
        assert!(matches!(Frame::body_len([0; 4]), Err(ProtocolError::Empty)));
        let big = Frame {
            opcode: op::IMPORT,
            payload: vec![0; MAX_FRAME],
        };
        assert!(big.to_bytes().is_err());
    }

    #[test]
    fn trailing_bytes_are_malformed() {
        let mut f = Request::Gc.encode();
        f.payload.push(0);
        assert!(matches!(Request::decode(&f), Err(ProtocolError::Malformed(_))));
    }
}
