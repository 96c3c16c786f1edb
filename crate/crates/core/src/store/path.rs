use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::StoreError;
use crate::base32;

/// Length in characters of a store path digest.
pub const DIGEST_LEN: usize = 32;
/// Number of hash bytes kept for a store path digest (160 bits).
pub const DIGEST_BYTES: usize = 20;

/// Base32 of the first 160 bits of the SHA-256 of `payload`.
pub fn compute_store_digest(payload: &[u8]) -> String {
    let hash = Sha256::digest(payload);
    base32::encode(&hash[..DIGEST_BYTES])
}

/// Lowercase hex SHA-256, used for content digests.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A hash-named store location, independent of where the store is rooted.
///
/// Ordering compares the digest then the name, which is the byte order of
/// the rendered form for any fixed root.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StorePath {
    digest: String,
    name: String,
}

impl StorePath {
    pub fn new(digest: impl Into<String>, name: impl Into<String>) -> Result<Self, StoreError> {
        let digest = digest.into();
        let name = name.into();
        if digest.len() != DIGEST_LEN || !base32::is_valid(&digest, DIGEST_BYTES) {
            return Err(StoreError::InvalidPath(format!("{digest}-{name}")));
        }
        validate_name(&name)?;
        Ok(Self { digest, name })
    }

    /// Parses `<digest>-<name>`.
    pub fn from_base_name(s: &str) -> Result<Self, StoreError> {
        if s.len() < DIGEST_LEN + 2 || !s.is_char_boundary(DIGEST_LEN) || s.as_bytes()[DIGEST_LEN] != b'-' {
            return Err(StoreError::InvalidPath(s.to_string()));
        }
        Self::new(&s[..DIGEST_LEN], &s[DIGEST_LEN + 1..])
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// `<digest>-<name>`, the entry name inside the store directory.
    pub fn base_name(&self) -> String {
        format!("{}-{}", self.digest, self.name)
    }
}

impl fmt::Display for StorePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.digest, self.name)
    }
}

impl fmt::Debug for StorePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StorePath({self})")
    }
}

impl FromStr for StorePath {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_base_name(s)
    }
}

/// Item names: `[A-Za-z0-9+._?=-]+`, not starting with `.` or `-`.
pub fn validate_name(name: &str) -> Result<(), StoreError> {
    let ok = !name.is_empty()
        && !name.starts_with('.')
        && !name.starts_with('-')
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b"+._?=-".contains(&b));
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidName(name.to_string()))
    }
}
