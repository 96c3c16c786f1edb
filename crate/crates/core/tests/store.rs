mod common;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::Path;

use hermit_core::store::{compute_store_digest, sha256_hex, Store, StoreConfig, StorePath};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use sha2::{Digest, Sha256};

const ALPHABET: &[u8] = b"0123456789abcdfghijklmnpqrsvwxyz";

/// Bit-string base32: the input as one big-endian number, five bits per
/// character, most significant first.
fn oracle_base32(bytes: &[u8]) -> String {
    let mut bits: String = bytes.iter().map(|b| format!("{b:08b}")).collect();
    while bits.len() % 5 != 0 {
        bits.insert(0, '0');
    }
    bits.as_bytes()
        .chunks(5)
        .map(|c| ALPHABET[usize::from_str_radix(std::str::from_utf8(c).unwrap(), 2).unwrap()] as char)
        .collect()
}

fn oracle_digest(payload: &[u8]) -> String {
    oracle_base32(&Sha256::digest(payload)[..20])
}

enum Tree {
    File(&'static [u8], bool),
    Link(&'static str),
    Dir(Vec<(&'static str, Tree)>),
}

fn oracle_archive(t: &Tree) -> Vec<u8> {
    fn word(out: &mut Vec<u8>, b: &[u8]) {
        out.extend_from_slice(&(b.len() as u64).to_le_bytes());
        out.extend_from_slice(b);
    }
    fn obj(t: &Tree, out: &mut Vec<u8>) {
        match t {
            Tree::File(c, x) => {
                out.push(b'F');
                out.push(*x as u8);
                word(out, c);
            }
            Tree::Link(target) => {
                out.push(b'S');
                word(out, target.as_bytes());
            }
            Tree::Dir(entries) => {
                let mut sorted: Vec<_> = entries.iter().collect();
                sorted.sort_by_key(|(n, _)| n.as_bytes());
                out.push(b'D');
                out.extend_from_slice(&(sorted.len() as u64).to_le_bytes());
                for (n, e) in sorted {
                    word(out, n.as_bytes());
                    obj(e, out);
                }
            }
        }
    }
    let mut out = b"HERMITAR1".to_vec();
    obj(t, &mut out);
    out
}

fn materialize(t: &Tree, at: &Path) {
    match t {
        Tree::File(c, x) => {
            fs::write(at, c).unwrap();
            let mode = if *x { 0o755 } else { 0o644 };
            fs::set_permissions(at, fs::Permissions::from_mode(mode)).unwrap();
        }
        Tree::Link(target) => std::os::unix::fs::symlink(target, at).unwrap(),
        Tree::Dir(entries) => {
            fs::create_dir(at).unwrap();
            for (n, e) in entries {
                materialize(e, &at.join(n));
            }
        }
    }
}

fn open(dir: &Path) -> Store {
    Store::open(StoreConfig::under(dir).unwrap()).unwrap()
}

#[test]
fn empty_payload_digest_is_frozen() {
    assert_eq!(compute_store_digest(b""), "wfqc8hlqzhf196pvyk49jvxr4hkswhg4");
    assert_eq!(compute_store_digest(b"a"), "rabq24na3fywmyn266rrl8yw9nkqdvzq");
    assert_eq!(oracle_digest(b""), "wfqc8hlqzhf196pvyk49jvxr4hkswhg4");
}

#[test]
fn digest_matches_oracle_on_random_payloads() {
    let mut rng = StdRng::seed_from_u64(7);
    for _ in 0..500 {
        let len = rng.gen_range(0..200);
        let payload: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        let d = compute_store_digest(&payload);
        assert_eq!(d.len(), 32);
        assert_eq!(d, oracle_digest(&payload));
    }
}

#[test]
fn single_byte_mutations_change_the_digest() {
    let mut rng = StdRng::seed_from_u64(11);
    let mut seen = HashSet::new();
    let mut inputs = HashSet::new();
    for _ in 0..1000 {
        let len = rng.gen_range(1..256);
        let payload: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        let mut mutated = payload.clone();
        let i = rng.gen_range(0..len);
        mutated[i] ^= rng.gen_range(1..=255u8);
        let (a, b) = (compute_store_digest(&payload), compute_store_digest(&mutated));
        assert_ne!(a, b);
        seen.insert(a);
        seen.insert(b);
        inputs.insert(payload);
        inputs.insert(mutated);
    }
    assert_eq!(seen.len(), inputs.len());
}

#[test]
fn adding_content_twice_yields_one_item() {
    let dir = tempfile::tempdir().unwrap();
    let store = open(dir.path());
    let src = dir.path().join("greeting.txt");
    fs::write(&src, "hi\n").unwrap();
    let a = store.add_content(&src, "greeting").unwrap();
    let b = store.add_content(&src, "greeting").unwrap();
    assert_eq!(a, b);
    assert_eq!(store.valid_items().unwrap().len(), 1);
    fs::write(&src, "hj\n").unwrap();
    let c = store.add_content(&src, "greeting").unwrap();
    assert_ne!(a, c);
}

#[test]
fn directory_path_matches_archive_oracle() {
    let tree = Tree::Dir(vec![
        ("zeta", Tree::File(b"last\n", false)),
        ("bin", Tree::Dir(vec![("run", Tree::File(b"#!/bin/sh\necho hi\n", true))])),
        ("alpha", Tree::Link("zeta")),
        ("empty", Tree::Dir(vec![])),
    ]);
    let dir = tempfile::tempdir().unwrap();
    let store = open(dir.path());
    let src = dir.path().join("pkg");
    materialize(&tree, &src);
    let path = store.add_content(&src, "pkg").unwrap();

    let archive = oracle_archive(&tree);
    let payload = format!("source:{}:pkg", hex::encode(Sha256::digest(&archive)));
    assert_eq!(path.digest(), oracle_digest(payload.as_bytes()));
    assert_eq!(store.item_archive_bytes(&path).unwrap(), archive);
    assert_eq!(store.query(&path).unwrap().unwrap().content_digest, sha256_hex(&archive));
    assert!(store.verify_item(&path).unwrap());
}

/// Test-side export stream writer.
struct StreamWriter {
    body: Vec<u8>,
    count: u64,
}

impl StreamWriter {
    fn new() -> Self {
        Self {
            body: b"HERMITEXP1".to_vec(),
            count: 0,
        }
    }

    fn word(&mut self, b: &[u8]) {
        self.body.extend_from_slice(&(b.len() as u64).to_le_bytes());
        self.body.extend_from_slice(b);
    }

    fn record(&mut self, path: &str, refs: &[String], archive: &[u8]) {
        self.body.push(b'R');
        self.word(path.as_bytes());
        self.body.extend_from_slice(&(refs.len() as u64).to_le_bytes());
        for r in refs {
            self.word(r.as_bytes());
        }
        self.word(b"-");
        self.word(hex::encode(Sha256::digest(archive)).as_bytes());
        self.word(archive);
        self.count += 1;
    }

    fn finish(mut self) -> Vec<u8> {
        self.body.push(b'E');
        self.body.extend_from_slice(&self.count.to_le_bytes());
        let sum = Sha256::digest(&self.body);
        self.body.extend_from_slice(&sum);
        self.body
    }
}

/// Registers node `i` with references `edges[i]` (all `< i`). Each item's
/// contents embed the digests it references.
fn import_dag(store: &Store, edges: &[Vec<usize>]) -> Vec<StorePath> {
    let paths: Vec<StorePath> = (0..edges.len())
        .map(|i| StorePath::new(compute_store_digest(format!("node:{i}").as_bytes()), format!("node-{i}")).unwrap())
        .collect();
    let mut w = StreamWriter::new();
    for (i, deps) in edges.iter().enumerate() {
        let refs: Vec<String> = deps.iter().map(|&d| store.render(&paths[d])).collect();
        let contents = format!("node {i}\n{}\n", refs.join("\n"));
        let mut archive = b"HERMITAR1F\x00".to_vec();
        archive.extend_from_slice(&(contents.len() as u64).to_le_bytes());
        archive.extend_from_slice(contents.as_bytes());
        w.record(&store.render(&paths[i]), &refs, &archive);
    }
    let bytes = w.finish();
    hermit_core::archive::import_stream(store, &mut bytes.as_slice()).unwrap();
    paths
}

fn random_dag(rng: &mut StdRng, n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|i| (0..i).filter(|_| rng.gen_bool(0.2)).collect())
        .collect()
}

fn reachable(edges: &[Vec<usize>], roots: &[usize]) -> BTreeSet<usize> {
    let mut seen = BTreeSet::new();
    let mut stack = roots.to_vec();
    while let Some(n) = stack.pop() {
        if seen.insert(n) {
            stack.extend(&edges[n]);
        }
    }
    seen
}

#[test]
fn closure_lists_dependencies_first() {
    let dir = tempfile::tempdir().unwrap();
    let store = open(dir.path());
    // 0 <- 1 <- 2
    let p = import_dag(&store, &[vec![], vec![0], vec![1]]);
    assert_eq!(store.closure(&[p[2].clone()]).unwrap(), vec![p[0].clone(), p[1].clone(), p[2].clone()]);
    assert_eq!(store.closure(&[p[0].clone()]).unwrap(), vec![p[0].clone()]);
}

#[test]
fn closure_matches_brute_force_and_is_topological() {
    let mut rng = StdRng::seed_from_u64(3);
    for _ in 0..20 {
        let dir = tempfile::tempdir().unwrap();
        let store = open(dir.path());
        let n = rng.gen_range(1..=20);
        let edges = random_dag(&mut rng, n);
        let paths = import_dag(&store, &edges);
        let roots: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.3)).collect();
        let rp: Vec<StorePath> = roots.iter().map(|&i| paths[i].clone()).collect();
        let order = store.closure(&rp).unwrap();
        let index: BTreeMap<&StorePath, usize> = paths.iter().enumerate().map(|(i, p)| (p, i)).collect();
        let got: BTreeSet<usize> = order.iter().map(|p| index[p]).collect();
        assert_eq!(got, reachable(&edges, &roots));
        assert_eq!(got.len(), order.len());
        let pos: BTreeMap<usize, usize> = order.iter().enumerate().map(|(k, p)| (index[p], k)).collect();
        for (&node, &k) in &pos {
            for d in &edges[node] {
                assert!(pos[d] < k, "dependency listed after dependent");
            }
        }
    }
}

#[test]
fn scan_matches_substring_oracle() {
    let mut rng = StdRng::seed_from_u64(5);
    let dir = tempfile::tempdir().unwrap();
    let store = open(dir.path());
    let edges = random_dag(&mut rng, 15);
    let paths = import_dag(&store, &edges);
    let candidates: BTreeSet<StorePath> = paths.iter().cloned().collect();
    for p in &paths {
        let bytes = store.item_archive_bytes(p).unwrap();
        let expected: BTreeSet<StorePath> = paths
            .iter()
            .filter(|c| bytes.windows(32).any(|w| w == c.digest().as_bytes()))
            .cloned()
            .collect();
        assert_eq!(store.scan_references(p, &candidates).unwrap(), expected);
        assert_eq!(store.references(p).unwrap(), expected);
    }
}

#[test]
fn gc_deletes_exactly_the_unreachable_items() {
    let mut rng = StdRng::seed_from_u64(17);
    for _ in 0..50 {
        let dir = tempfile::tempdir().unwrap();
        let store = open(dir.path());
        let n = rng.gen_range(1..=20);
        let edges = random_dag(&mut rng, n);
        let paths = import_dag(&store, &edges);
        let roots: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.25)).collect();
        for &r in &roots {
            store.add_gc_root(&format!("r{r}"), &paths[r]).unwrap();
        }
        let live = reachable(&edges, &roots);
        let report = store.collect_garbage().unwrap();
        let deleted: BTreeSet<&StorePath> = report.deleted.iter().collect();
        let expected: BTreeSet<&StorePath> = (0..n).filter(|i| !live.contains(i)).map(|i| &paths[i]).collect();
        assert_eq!(deleted, expected);
        for (i, p) in paths.iter().enumerate() {
            let on_disk = store.config().physical_path(p).exists();
            if live.contains(&i) {
                assert!(store.is_valid(p).unwrap());
                assert!(store.verify_item(p).unwrap());
            } else {
                assert!(!store.is_valid(p).unwrap());
                assert!(!on_disk);
            }
        }
        assert!(store.collect_garbage().unwrap().deleted.is_empty());
    }
}

#[test]
fn removing_a_root_releases_its_closure() {
    let dir = tempfile::tempdir().unwrap();
    let store = open(dir.path());
    let p = import_dag(&store, &[vec![], vec![0]]);
    store.add_gc_root("keep", &p[1]).unwrap();
    store.add_gc_root("keep", &p[1]).unwrap();
    assert!(store.add_gc_root("keep", &p[0]).is_err());
    assert!(store.collect_garbage().unwrap().deleted.is_empty());
    store.remove_gc_root("keep").unwrap();
    assert_eq!(store.collect_garbage().unwrap().deleted.len(), 2);
}

#[test]
fn interrupted_batch_is_ignored_and_strays_discarded() {
    let dir = tempfile::tempdir().unwrap();
    let store = open(dir.path());
    let src = dir.path().join("f");
    fs::write(&src, "x").unwrap();
    let kept = store.add_content(&src, "f").unwrap();

    // A half-written record and an on-disk entry nobody registered.
    let stray = StorePath::new(compute_store_digest(b"stray"), "stray").unwrap();
    let db = store.config().db_path.clone();
    let mut text = fs::read_to_string(&db).unwrap();
    text.push_str(&format!("item {} deadbeef - 0\n", store.render(&stray)));
    fs::write(&db, text).unwrap();
    fs::write(store.config().physical_path(&stray), "junk").unwrap();

    let store = open(dir.path());
    assert!(store.is_valid(&kept).unwrap());
    assert!(!store.is_valid(&stray).unwrap());
    assert_eq!(store.discard_unregistered().unwrap(), 1);
    assert!(!store.config().physical_path(&stray).exists());
    assert!(store.verify_item(&kept).unwrap());
}
