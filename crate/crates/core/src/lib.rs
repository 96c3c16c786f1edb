//! Core of the hermit functional package manager.
//!
//! Builds are treated as pure functions whose results live in a
//! content-addressed store. Packages are declarative values forming a DAG,
//! they are lowered to derivations whose output paths hash every input, and
//! user profiles are generations of union items that can be rolled back.

pub mod archive;
pub mod base32;
pub mod bootstrap;
pub mod build;
pub mod canon;
pub mod deriv;
mod error;
mod lock;
pub mod model;
pub mod ops;
pub mod profile;
pub mod sandbox;
pub mod store;

pub use error::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;
