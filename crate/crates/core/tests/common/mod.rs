#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use hermit_core::build::RealizeOptions;
use hermit_core::deriv::{compile, DerivationGraph};
use hermit_core::model::{load_recipes, Package, PackageRef, RecipeSet};
use hermit_core::ops::{LocalStore, StoreOps};
use hermit_core::store::StoreConfig;

pub const SYSTEM: &str = "x86_64-linux";

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn corpus() -> RecipeSet {
    load_recipes(&[fixtures().join("recipes")]).expect("corpus loads")
}

pub fn corpus_with_tests() -> RecipeSet {
    load_recipes(&[fixtures().join("recipes"), fixtures().join("test-recipes")]).expect("corpus loads")
}

pub fn pkg(set: &RecipeSet, spec: &str) -> Arc<Package> {
    set.resolve(&spec.parse::<PackageRef>().unwrap()).unwrap()
}

pub struct Scratch {
    pub dir: tempfile::TempDir,
    pub store: LocalStore,
}

pub fn scratch() -> Scratch {
    let dir = tempfile::tempdir().unwrap();
    let store = LocalStore::open(StoreConfig::under(dir.path()).unwrap()).unwrap();
    Scratch { dir, store }
}

pub fn open_at(dir: &Path) -> LocalStore {
    LocalStore::open(StoreConfig::under(dir).unwrap()).unwrap()
}

pub fn graph(store: &dyn StoreOps, p: &Arc<Package>) -> DerivationGraph {
    compile(p, &store.compile_context(SYSTEM).unwrap()).unwrap()
}

pub fn opts() -> RealizeOptions {
    RealizeOptions::default()
}
