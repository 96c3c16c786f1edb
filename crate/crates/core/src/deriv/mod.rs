//! Derivations: the low-level build description packages compile to.
//!
//! A derivation's output path is known before anything is built, because it
//! hashes the canonical text of the derivation, which in turn names the
//! output paths of every input.

mod compile;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

pub use compile::{compile, compile_union, CompileContext, DerivationGraph, UnionEntry, BOOTSTRAP_LABEL};

use crate::base32;
use crate::store::{compute_store_digest, sha256_hex, StoreError, StorePath};

#[derive(Debug, thiserror::Error)]
pub enum DerivError {
    #[error("package `{0}` uses the generic build system but has no source")]
    MissingSource(String),
    #[error("malformed derivation: {0}")]
    Parse(String),
    #[error("invalid derivation `{name}`: {message}")]
    Invalid { name: String, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Builder {
    Fetch,
    WriteFiles,
    Union,
    Exec,
}

impl Builder {
    pub const ALL: [Builder; 4] = [Builder::Fetch, Builder::WriteFiles, Builder::Union, Builder::Exec];

    pub fn as_str(self) -> &'static str {
        match self {
            Builder::Fetch => "builtin:fetch",
            Builder::WriteFiles => "builtin:write-files",
            Builder::Union => "builtin:union",
            Builder::Exec => "builtin:exec",
        }
    }
}

impl fmt::Display for Builder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Builder {
    type Err = DerivError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Builder::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| DerivError::Parse(format!("unknown builder `{s}`")))
    }
}

/// Declared content hash of a fixed-output derivation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FixedOutput {
    pub algo: String,
    /// 52-character base32 digest.
    pub digest: String,
}

impl FixedOutput {
    pub fn sha256(digest: &str) -> Self {
        Self {
            algo: "sha256".to_string(),
            digest: digest.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Derivation {
    pub name: String,
    pub system: String,
    pub builder: Builder,
    pub args: Vec<String>,
    pub env: BTreeMap<String, String>,
    /// `(derivation digest, rendered output path)`, sorted.
    pub input_drvs: Vec<(String, String)>,
    /// Rendered store paths, sorted.
    pub input_srcs: Vec<String>,
    pub fixed: Option<FixedOutput>,
}

const ESCAPED: &[u8] = b"%;,=[]()";

fn escape_str(s: &str) -> String {
    let mut out = Vec::with_capacity(s.len());
    for &b in s.as_bytes() {
        if b < 0x20 || ESCAPED.contains(&b) {
            out.extend_from_slice(format!("%{b:02X}").as_bytes());
        } else {
            out.push(b);
        }
    }
    // Only ASCII bytes were replaced, so the result is still UTF-8.
    String::from_utf8(out).expect("escaping keeps UTF-8 valid")
}

fn unescape(s: &str) -> Result<String, DerivError> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if b == b'%' {
            let hex = bytes
                .get(i + 1..i + 3)
                .ok_or_else(|| DerivError::Parse(format!("truncated escape in `{s}`")))?;
            let upper = |c: u8| c.is_ascii_digit() || (b'A'..=b'F').contains(&c);
            if !hex.iter().all(|&c| upper(c)) {
                return Err(DerivError::Parse(format!("bad escape in `{s}`")));
            }
            let v = u8::from_str_radix(std::str::from_utf8(hex).expect("ascii"), 16).expect("checked hex");
            if !(v < 0x20 || ESCAPED.contains(&v)) {
                return Err(DerivError::Parse(format!("needless escape %{v:02X} in `{s}`")));
            }
            out.push(v);
            i += 3;
        } else if b < 0x20 || ESCAPED.contains(&b) {
            return Err(DerivError::Parse(format!("unescaped byte {b:#04x} in `{s}`")));
        } else {
            out.push(b);
            i += 1;
        }
    }
    String::from_utf8(out).map_err(|_| DerivError::Parse("non-UTF-8 value".into()))
}

impl Derivation {
    pub fn new(name: &str, system: &str, builder: Builder) -> Self {
        Self {
            name: name.to_string(),
            system: system.to_string(),
            builder,
            args: Vec::new(),
            env: BTreeMap::new(),
            input_drvs: Vec::new(),
            input_srcs: Vec::new(),
            fixed: None,
        }
    }

    /// Canonical text, the payload of every hash over this derivation.
    pub fn serialize(&self) -> String {
        let list = |items: &mut dyn Iterator<Item = String>| format!("[{}]", items.collect::<Vec<_>>().join(","));
        format!(
            "Drv(name={};system={};builder={};args={};env={};inputDrvs={};inputSrcs={};fixed={})",
            escape_str(&self.name),
            escape_str(&self.system),
            self.builder,
            list(&mut self.args.iter().map(|a| escape_str(a))),
            list(&mut self.env.iter().map(|(k, v)| format!("{}={}", escape_str(k), escape_str(v)))),
            list(&mut self
                .input_drvs
                .iter()
                .map(|(d, p)| format!("{}:{}", escape_str(d), escape_str(p)))),
            list(&mut self.input_srcs.iter().map(|s| escape_str(s))),
            match &self.fixed {
                Some(f) => format!("{}:{}", escape_str(&f.algo), escape_str(&f.digest)),
                None => "-".to_string(),
            }
        )
    }

    pub fn parse(text: &str) -> Result<Self, DerivError> {
        let body = text
            .strip_prefix("Drv(")
            .and_then(|t| t.strip_suffix(')'))
            .ok_or_else(|| DerivError::Parse("expected `Drv(...)`".into()))?;
        let fields: Vec<&str> = body.split(';').collect();
        const KEYS: [&str; 8] = ["name", "system", "builder", "args", "env", "inputDrvs", "inputSrcs", "fixed"];
        if fields.len() != KEYS.len() {
            return Err(DerivError::Parse(format!("expected {} fields, found {}", KEYS.len(), fields.len())));
        }
        let mut values = Vec::new();
        for (field, key) in fields.iter().zip(KEYS) {
            let v = field
                .strip_prefix(key)
                .and_then(|f| f.strip_prefix('='))
                .ok_or_else(|| DerivError::Parse(format!("expected field `{key}`")))?;
            values.push(v);
        }
        let list = |v: &str| -> Result<Vec<String>, DerivError> {
            let inner = v
                .strip_prefix('[')
                .and_then(|v| v.strip_suffix(']'))
                .ok_or_else(|| DerivError::Parse(format!("expected a list, found `{v}`")))?;
            if inner.is_empty() {
                return Ok(Vec::new());
            }
            inner.split(',').map(|s| Ok(s.to_string())).collect()
        };
        let mut drv = Derivation::new(&unescape(values[0])?, &unescape(values[1])?, values[2].parse()?);
        drv.args = list(values[3])?.iter().map(|a| unescape(a)).collect::<Result<_, _>>()?;
        for kv in list(values[4])? {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| DerivError::Parse(format!("env entry `{kv}` lacks `=`")))?;
            let k = unescape(k)?;
            if drv.env.last_key_value().is_some_and(|(last, _)| *last >= k) {
                return Err(DerivError::Parse(format!("env key `{k}` out of order")));
            }
            drv.env.insert(k, unescape(v)?);
        }
        for entry in list(values[5])? {
            let (d, p) = entry
                .split_once(':')
                .ok_or_else(|| DerivError::Parse(format!("input derivation `{entry}` lacks `:`")))?;
            drv.input_drvs.push((unescape(d)?, unescape(p)?));
        }
        drv.input_srcs = list(values[6])?.iter().map(|s| unescape(s)).collect::<Result<_, _>>()?;
        drv.fixed = match values[7] {
            "-" => None,
            f => {
                let (algo, digest) = f
                    .split_once(':')
                    .ok_or_else(|| DerivError::Parse(format!("bad fixed output `{f}`")))?;
                Some(FixedOutput {
                    algo: unescape(algo)?,
                    digest: unescape(digest)?,
                })
            }
        };
        if drv.serialize() != text {
            return Err(DerivError::Parse("text is not in canonical form".into()));
        }
        Ok(drv)
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<(), DerivError> {
        let bad = |message: String| DerivError::Invalid {
            name: self.name.clone(),
            message,
        };
        crate::store::validate_name(&self.name)?;
        if (self.builder == Builder::Fetch) != self.fixed.is_some() {
            return Err(bad("a fixed output is required exactly for fetch derivations".into()));
        }
        if let Some(f) = &self.fixed {
            if f.algo != "sha256" || !base32::is_valid(&f.digest, 32) {
                return Err(bad(format!("bad fixed output {}:{}", f.algo, f.digest)));
            }
        }
        let hex = |d: &str| d.len() == 64 && d.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'));
        if let Some((d, _)) = self.input_drvs.iter().find(|(d, _)| !hex(d)) {
            return Err(bad(format!("input derivation digest `{d}` is not 64 hex digits")));
        }
        if self.args.iter().any(String::is_empty)
            || self.input_srcs.iter().any(String::is_empty)
            || self.input_drvs.iter().any(|(_, p)| p.is_empty())
        {
            return Err(bad("list elements must not be empty".into()));
        }
        if !self.input_drvs.windows(2).all(|w| w[0] < w[1]) || !self.input_srcs.windows(2).all(|w| w[0] < w[1]) {
            return Err(bad("inputs must be sorted and unique".into()));
        }
        Ok(())
    }

    /// Identity used when other derivations refer to this one. Fixed-output
    /// derivations are identified by what they produce, not how they fetch it.
    pub fn digest(&self) -> String {
        match &self.fixed {
            Some(f) => sha256_hex(self.fixed_payload(f).as_bytes()),
            None => sha256_hex(self.serialize().as_bytes()),
        }
    }

    fn fixed_payload(&self, f: &FixedOutput) -> String {
        format!("fixed:out:{}:{}:{}", f.algo, f.digest, self.name)
    }

    pub fn output_path(&self) -> Result<StorePath, DerivError> {
        let payload = match &self.fixed {
            Some(f) => self.fixed_payload(f),
            None => format!("output:out:{}:{}", sha256_hex(self.serialize().as_bytes()), self.name),
        };
        Ok(StorePath::new(compute_store_digest(payload.as_bytes()), self.name.as_str())?)
    }
}

impl fmt::Display for Derivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}
