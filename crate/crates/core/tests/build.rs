mod common;

use std::collections::BTreeSet;
use std::fs;

use common::*;
use hermit_core::build::{BuildError, BuildStatus, RealizeOptions};
use hermit_core::ops::StoreOps;

#[test]
fn hello_chain_builds_then_caches() {
    let s = scratch();
    let set = corpus();
    let g = graph(&s.store, &pkg(&set, "hello"));
    let first = s.store.realize(&g, opts()).unwrap();
    assert_eq!(first.count(BuildStatus::Built), 3, "{first:#?}");
    let out = first.output().unwrap();
    assert!(out.to_string().ends_with("-hello-2.10"));
    let hello = s.store.physical_path(&out).join("bin/hello");
    let script = fs::read_to_string(&hello).unwrap();
    assert!(script.contains("-libgreet-1.0/share/greeting"), "{script}");
    let spawns = s.store.coordinator().spawns();
    let second = s.store.realize(&g, opts()).unwrap();
    assert_eq!(second.count(BuildStatus::Cached), 3);
    assert_eq!(s.store.coordinator().spawns(), spawns);
    let refs = s.store.references(&out).unwrap();
    let names: BTreeSet<&str> = refs.iter().map(|p| p.name()).collect();
    assert_eq!(names, BTreeSet::from(["bootstrap-seed", "libgreet-1.0"]));
}

#[test]
fn check_mode_on_write_files_passes() {
    let s = scratch();
    let g = graph(&s.store, &pkg(&corpus(), "libgreet"));
    s.store.realize(&g, opts()).unwrap().output().unwrap();
    let check = RealizeOptions { check: true, jobs: 1 };
    let r = s.store.realize(&g, check).unwrap();
    r.output().unwrap();
    assert_eq!(r.count(BuildStatus::Built), 1);
}

#[test]
fn noise_is_flagged_by_check() {
    let s = scratch();
    let g = graph(&s.store, &pkg(&corpus_with_tests(), "noise"));
    s.store.realize(&g, opts()).unwrap().output().unwrap();
    let r = s.store.realize(&g, RealizeOptions { check: true, jobs: 1 }).unwrap();
    match r.output() {
        Err(BuildError::NonDeterministic { difference, .. }) => assert!(difference.starts_with("noise:"), "{difference}"),
        other => panic!("expected non-determinism, got {other:?}"),
    }
}

#[test]
fn undeclared_tool_is_not_found() {
    let s = scratch();
    let set = corpus_with_tests();
    let bad = s.store.realize(&graph(&s.store, &pkg(&set, "compress")), opts()).unwrap();
    match bad.output() {
        Err(BuildError::Builder { build_dir: Some(kept), .. }) => {
            assert!(std::path::Path::new(&kept).is_dir());
            hermit_core::store::remove_tree(std::path::Path::new(&kept)).unwrap();
        }
        other => panic!("{other:?}"),
    }
    let good = s.store.realize(&graph(&s.store, &pkg(&set, "compress-with-gzip")), opts()).unwrap();
    let out = good.output().unwrap();
    let data = fs::read(s.store.physical_path(&out).join("data.gz")).unwrap();
    assert_eq!(data, fs::read(fixtures().join("sources/compress-1.0.txt")).unwrap());
}

#[test]
fn probe_sees_exactly_the_declared_environment() {
    let set = corpus_with_tests();
    for _ in 0..3 {
        let s = scratch();
        let g = graph(&s.store, &pkg(&set, "probe"));
        let out = s.store.realize(&g, opts()).unwrap().output().unwrap();
        let raw = fs::read(s.store.physical_path(&out)).unwrap();
        let seen: std::collections::BTreeMap<String, String> = raw
            .split(|&b| b == 0)
            .filter(|kv| !kv.is_empty())
            .map(|kv| {
                let kv = String::from_utf8(kv.to_vec()).unwrap();
                let (k, v) = kv.split_once('=').unwrap();
                (k.to_string(), v.to_string())
            })
            .collect();
        let tmp = seen.get("TMPDIR").cloned().unwrap_or_default();
        assert!(tmp.contains("hermit-build-probe-1.0-"), "{tmp}");
        let expected = hermit_core::sandbox::exact_env(
            g.root_drv(),
            std::path::Path::new(&tmp),
            &s.store.physical_path(&out).display().to_string(),
        );
        assert_eq!(seen, expected);
        assert!(!std::path::Path::new(&tmp).exists(), "build dir left behind");
    }
}
