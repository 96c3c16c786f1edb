use std::io::Write;
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Barrier};
use std::time::Duration;

use hermit_client::{Client, ClientError, RemoteStore};
use hermit_core::build::{BuildStatus, RealizeOptions};
use hermit_core::deriv::{compile, DerivationGraph};
use hermit_core::model::{load_recipes, RecipeSet};
use hermit_core::ops::{LocalStore, RootKind, StoreOps};
use hermit_core::store::{StoreConfig, StorePath};
use hermit_protocol::{read_frame, Request, Response};

const SYSTEM: &str = "x86_64-linux";

fn corpus() -> RecipeSet {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/recipes");
    load_recipes(&[dir]).unwrap()
}

fn graph_for(store: &dyn StoreOps, set: &RecipeSet, name: &str) -> DerivationGraph {
    let pkg = set.resolve(&name.parse().unwrap()).unwrap();
    compile(&pkg, &store.compile_context(SYSTEM).unwrap()).unwrap()
}

struct Running {
    dir: tempfile::TempDir,
    handle: hermit_daemon::Handle,
}

impl Running {
    fn socket(&self) -> PathBuf {
        self.handle.socket().to_path_buf()
    }

    fn remote(&self) -> RemoteStore {
        RemoteStore::connect(&self.socket(), Some(Duration::from_secs(120))).unwrap()
    }
}

fn config(dir: &Path) -> StoreConfig {
    StoreConfig::under(dir).unwrap()
}

fn start() -> Running {
    let dir = tempfile::tempdir().unwrap();
    let handle = hermit_daemon::spawn(config(dir.path()), &hermit_daemon::socket_path(dir.path())).unwrap();
    Running { dir, handle }
}

#[test]
fn handshake_and_ping() {
    let d = start();
    let mut c = Client::connect(&d.socket(), Some(Duration::from_secs(10))).unwrap();
    assert_eq!(c.ping().unwrap(), "1");
    assert_eq!(c.welcome().logical_root, config(d.dir.path()).logical_root);
    assert_eq!(c.spawns().unwrap(), 0);
}

#[test]
fn version_mismatch_is_a_typed_error() {
    let d = start();
    let mut raw = UnixStream::connect(d.socket()).unwrap();
    raw.write_all(&Request::Hello { version: "0".into() }.encode().to_bytes().unwrap()).unwrap();
    match Response::decode(&read_frame(&mut raw).unwrap()).unwrap() {
        Response::Error { kind, .. } => assert_eq!(kind, "version"),
        r => panic!("{r:?}"),
    }
    // The daemon closed the session.
    assert!(read_frame(&mut raw).is_err());
}

#[test]
fn requests_before_hello_are_refused() {
    let d = start();
    let mut raw = UnixStream::connect(d.socket()).unwrap();
    raw.write_all(&Request::Ping.encode().to_bytes().unwrap()).unwrap();
    assert!(matches!(
        Response::decode(&read_frame(&mut raw).unwrap()).unwrap(),
        Response::Error { .. }
    ));
}

#[test]
fn malformed_frames_close_only_their_session() {
    let d = start();
    let mut good = Client::connect(&d.socket(), Some(Duration::from_secs(10))).unwrap();
    let mut bad = UnixStream::connect(d.socket()).unwrap();
    bad.write_all(&[0xff, 0xff, 0xff, 0x7f, 0x01]).unwrap();
    match Response::decode(&read_frame(&mut bad).unwrap()).unwrap() {
        Response::Error { kind, .. } => assert_eq!(kind, "protocol"),
        r => panic!("{r:?}"),
    }
    assert!(read_frame(&mut bad).is_err());
    let mut junk = UnixStream::connect(d.socket()).unwrap();
    junk.write_all(&[2, 0, 0, 0, 0x55, 0x00]).unwrap();
    assert!(matches!(
        Response::decode(&read_frame(&mut junk).unwrap()).unwrap(),
        Response::Error { .. }
    ));
    assert_eq!(good.ping().unwrap(), "1");
    assert!(Client::connect(&d.socket(), None).is_ok());
}

#[test]
fn realize_matches_a_library_build() {
    let dir = tempfile::tempdir().unwrap();
    let set = corpus();
    let (expected, digests) = {
        let local = LocalStore::open(config(dir.path())).unwrap();
        let out = local.realize(&graph_for(&local, &set, "hello"), RealizeOptions::default()).unwrap().output().unwrap();
        let closure = local.closure(&[out.clone()]).unwrap();
        let digests: Vec<String> = closure
            .iter()
            .map(|p| local.store().query(p).unwrap().unwrap().content_digest)
            .collect();
        (local.render(&out), digests)
    };
    std::fs::remove_dir_all(dir.path()).unwrap();
    std::fs::create_dir(dir.path()).unwrap();

    let handle = hermit_daemon::spawn(config(dir.path()), &hermit_daemon::socket_path(dir.path())).unwrap();
    let remote = RemoteStore::connect(handle.socket(), None).unwrap();
    let g = graph_for(&remote, &set, "hello");
    let r = remote.realize(&g, RealizeOptions::default()).unwrap();
    let out = r.output().unwrap();
    assert_eq!(remote.render(&out), expected);
    assert_eq!(r.count(BuildStatus::Built), 3);
    assert_eq!(remote.spawns().unwrap(), 3);

    let local = LocalStore::open(config(dir.path())).unwrap();
    let closure = remote.closure(&[out.clone()]).unwrap();
    assert_eq!(closure, local.closure(&[out.clone()]).unwrap());
    let remote_digests: Vec<String> = closure
        .iter()
        .map(|p| local.store().query(p).unwrap().unwrap().content_digest)
        .collect();
    assert_eq!(remote_digests, digests);

    // Arriving after completion: cached, no new builder.
    let again = remote.realize(&g, RealizeOptions::default()).unwrap();
    assert_eq!(again.count(BuildStatus::Cached), 3);
    assert_eq!(remote.spawns().unwrap(), 3);
}

#[test]
fn queries_roots_and_gc() {
    let d = start();
    let remote = d.remote();
    let absent = StorePath::new("0".repeat(32), "nothing").unwrap();
    assert!(!remote.is_valid(&absent).unwrap());

    let a = remote.add_text("a", b"alpha").unwrap();
    let b = remote.add_text("b", b"beta").unwrap();
    assert!(remote.is_valid(&a).unwrap());
    remote.add_root("keep-a", &remote.render(&a), RootKind::Direct).unwrap();
    let report = remote.collect_garbage().unwrap();
    assert!(report.deleted.contains(&b));
    assert!(remote.is_valid(&a).unwrap());
    assert!(!remote.is_valid(&b).unwrap());
    remote.remove_root("keep-a").unwrap();
    assert!(remote.collect_garbage().unwrap().deleted.contains(&a));

    let err = remote.add_root("bad", "/elsewhere/x", RootKind::Direct).unwrap_err();
    assert!(matches!(err, hermit_core::Error::Remote { .. }), "{err}");
}

#[test]
fn export_and_import_through_the_daemon() {
    let a = start();
    let set = corpus();
    let ra = a.remote();
    let out = ra.realize(&graph_for(&ra, &set, "hello"), RealizeOptions::default()).unwrap().output().unwrap();
    let mut stream = Vec::new();
    let n = ra.export(&[out.clone()], &mut stream).unwrap();
    let closure = ra.closure(&[out.clone()]).unwrap();
    assert_eq!(n, closure.len());

    let dir = tempfile::tempdir().unwrap();
    let cfg = StoreConfig::new(
        ra.logical_root(),
        dir.path().join("store"),
        dir.path().join("state/db"),
        dir.path().join("state/roots"),
    )
    .unwrap();
    let b = hermit_daemon::spawn(cfg, &dir.path().join("sock")).unwrap();
    let rb = RemoteStore::connect(b.socket(), None).unwrap();
    let report = rb.import(&mut stream.as_slice()).unwrap();
    assert_eq!(report.paths.len(), closure.len());
    assert_eq!(rb.closure(&[out.clone()]).unwrap(), closure);
    assert!(rb.import(&mut stream.as_slice()).unwrap().registered.is_empty());
}

#[test]
fn temp_roots_are_released_on_disconnect() {
    let d = start();
    let keeper = d.remote();
    let item = keeper.add_text("held", b"held").unwrap();
    keeper.add_root("", &keeper.render(&item), RootKind::Temp).unwrap();
    let other = d.remote();
    other.collect_garbage().unwrap();
    assert!(other.is_valid(&item).unwrap());
    drop(keeper);
    // Release happens asynchronously after the socket closes.
    let mut deleted = false;
    for _ in 0..100 {
        if other.collect_garbage().unwrap().deleted.contains(&item) {
            deleted = true;
            break;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    assert!(deleted);
}

#[test]
fn disconnect_mid_realize_still_registers() {
    let d = start();
    let set = corpus();
    let remote = d.remote();
    let g = graph_for(&remote, &set, "openmpi");
    let out = g.output();
    drop(remote);
    let mut c = Client::connect(&d.socket(), None).unwrap();
    let req = Request::Realize {
        graph: g.clone(),
        options: RealizeOptions::default(),
    };
    // Send and hang up without reading the reply.
    {
        let stream = UnixStream::connect(d.socket()).unwrap();
        let mut s = stream;
        s.write_all(&Request::Hello { version: "1".into() }.encode().to_bytes().unwrap()).unwrap();
        read_frame(&mut s).unwrap();
        s.write_all(&req.encode().to_bytes().unwrap()).unwrap();
    }
    let mut valid = false;
    for _ in 0..600 {
        if let Response::Bool(true) = c.call(&Request::QueryValid(out.clone())).unwrap() {
            valid = true;
            break;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    assert!(valid);
    // Nothing keeps the result alive once the session is gone.
    let mut collected = false;
    for _ in 0..100 {
        if let Response::Gc(r) = c.call(&Request::Gc).unwrap() {
            if r.deleted.contains(&out) {
                collected = true;
                break;
            }
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    assert!(collected);
}

#[test]
fn concurrent_clients_build_each_derivation_once() {
    let d = start();
    let set = corpus();
    let probe = d.remote();
    let g = Arc::new(graph_for(&probe, &set, "starpu-with-simgrid"));
    let expected = g.texts().len() as u64;
    let barrier = Arc::new(Barrier::new(8));
    let outs: Vec<StorePath> = std::thread::scope(|s| {
        let workers: Vec<_> = (0..8)
            .map(|_| {
                let (g, barrier, socket) = (g.clone(), barrier.clone(), d.socket());
                s.spawn(move || {
                    let r = RemoteStore::connect(&socket, None).unwrap();
                    barrier.wait();
                    r.realize(&g, RealizeOptions::default()).unwrap().output().unwrap()
                })
            })
            .collect();
        workers.into_iter().map(|w| w.join().unwrap()).collect()
    });
    assert!(outs.iter().all(|o| *o == g.output()));
    assert_eq!(probe.spawns().unwrap(), expected);
}

#[test]
fn shared_dependency_is_built_once() {
    let d = start();
    let set = corpus();
    let probe = d.remote();
    let a = graph_for(&probe, &set, "starpu");
    let b = graph_for(&probe, &set, "openmpi");
    let mut all: std::collections::BTreeSet<String> = a.texts().into_iter().collect();
    all.extend(b.texts());
    std::thread::scope(|s| {
        for g in [&a, &b] {
            let socket = d.socket();
            s.spawn(move || {
                let r = RemoteStore::connect(&socket, None).unwrap();
                r.realize(g, RealizeOptions::default()).unwrap().output().unwrap();
            });
        }
    });
    assert_eq!(probe.spawns().unwrap(), all.len() as u64);
}

#[test]
fn missing_daemon_is_diagnosed() {
    let dir = tempfile::tempdir().unwrap();
    let sock = hermit_daemon::socket_path(dir.path());
    match Client::connect(&sock, None) {
        Err(e @ ClientError::DaemonNotRunning(_)) => assert!(e.to_string().contains(&sock.display().to_string())),
        other => panic!("{:?}", other.err()),
    }
}
