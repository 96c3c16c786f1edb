use crate::archive::ArchiveError;
use crate::build::BuildError;
use crate::deriv::DerivError;
use crate::model::ModelError;
use crate::profile::ProfileError;
use crate::store::StoreError;

/// Any failure surfaced by the library or by a store backend.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Deriv(#[from] DerivError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("i/o error: {0}")]
    Io(String),
    /// An error reported by a remote store (the daemon).
    #[error("{kind}: {message}")]
    Remote { kind: String, message: String },
}

impl Error {
    /// Short machine-readable category, used on the wire.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Store(_) => "store",
            Error::Archive(_) => "archive",
            Error::Model(_) => "model",
            Error::Deriv(_) => "derivation",
            Error::Build(_) => "build",
            Error::Profile(_) => "profile",
            Error::Io(_) => "io",
            Error::Remote { .. } => "remote",
        }
    }
}
