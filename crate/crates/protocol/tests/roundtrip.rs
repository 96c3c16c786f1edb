use std::collections::BTreeMap;
use std::sync::Arc;

use hermit_core::archive::ImportReport;
use hermit_core::build::{BuildError, BuildResult, BuildStatus, Realization, RealizeOptions};
use hermit_core::deriv::{compile, CompileContext, DerivationGraph};
use hermit_core::model::{BuildSystem, Input, Package};
use hermit_core::ops::RootKind;
use hermit_core::store::{GcReport, StorePath};
use hermit_protocol::{read_frame, write_frame, Frame, Request, Response};
use proptest::prelude::*;

fn store_path() -> impl Strategy<Value = StorePath> {
    (
        "[0123456789abcdfghijklmnpqrsvwxyz]{32}",
        "[a-z][a-z0-9.+-]{0,12}",
    )
        .prop_map(|(d, n)| StorePath::new(d, n).unwrap())
}

fn text() -> impl Strategy<Value = String> {
    "[ -~\\n]{0,16}"
}

fn build_error() -> impl Strategy<Value = BuildError> {
    prop_oneof![
        (text(), text(), text(), proptest::option::of(text())).prop_map(|(path, reason, log, build_dir)| {
            BuildError::Builder {
                path,
                reason,
                log,
                build_dir,
            }
        }),
        (text(), text()).prop_map(|(path, dependency)| BuildError::Dependency { path, dependency }),
        (text(), text()).prop_map(|(path, difference)| BuildError::NonDeterministic { path, difference }),
        (text(), text()).prop_map(|(path, message)| BuildError::Output { path, message }),
        (text(), text()).prop_map(|(path, input)| BuildError::MissingInput { path, input }),
        text().prop_map(BuildError::Internal),
    ]
}

fn realization() -> impl Strategy<Value = Realization> {
    proptest::collection::btree_map(
        "[0-9a-f]{8}",
        (
            store_path(),
            0..3u8,
            proptest::collection::vec(any::<u8>(), 0..20),
            proptest::collection::btree_set(store_path(), 0..3),
            proptest::option::of(build_error()),
        ),
        1..4,
    )
    .prop_map(|m| {
        let results: BTreeMap<String, BuildResult> = m
            .into_iter()
            .map(|(k, (path, s, log, references, error))| {
                let status = [BuildStatus::Built, BuildStatus::Cached, BuildStatus::Failed][s as usize];
                (
                    k,
                    BuildResult {
                        path,
                        status,
                        log,
                        references,
                        error,
                    },
                )
            })
            .collect();
        Realization {
            root: results.keys().next().unwrap().clone(),
            results,
        }
    })
}

fn graph() -> DerivationGraph {
    let leaf = Arc::new(Package::new("leaf", "1", BuildSystem::Trivial));
    let mut root = Package::new("root", "1", BuildSystem::Union);
    root.inputs.push(Input::new("leaf", leaf));
    let ctx = CompileContext {
        logical_root: "/s".into(),
        system: "x86_64-linux".into(),
        bootstrap: StorePath::new("0".repeat(32), "seed").unwrap(),
    };
    compile(&Arc::new(root), &ctx).unwrap()
}

fn request() -> impl Strategy<Value = Request> {
    prop_oneof![
        text().prop_map(|version| Request::Hello { version }),
        Just(Request::Ping),
        (text(), proptest::collection::vec(any::<u8>(), 0..64))
            .prop_map(|(name, archive)| Request::AddContent { name, archive }),
        (any::<bool>(), 1..8usize).prop_map(|(check, jobs)| Request::Realize {
            graph: graph(),
            options: RealizeOptions { check, jobs },
        }),
        store_path().prop_map(Request::QueryValid),
        store_path().prop_map(Request::QueryRefs),
        proptest::collection::vec(store_path(), 0..4).prop_map(Request::Closure),
        (text(), text(), 0..3u8).prop_map(|(name, target, k)| Request::AddRoot {
            name,
            target,
            kind: RootKind::from_u8(k).unwrap(),
        }),
        text().prop_map(Request::RemoveRoot),
        Just(Request::Gc),
        proptest::collection::vec(store_path(), 0..4).prop_map(Request::Export),
        proptest::collection::vec(any::<u8>(), 0..64).prop_map(Request::Import),
        Just(Request::Stats),
    ]
}

fn response() -> impl Strategy<Value = Response> {
    prop_oneof![
        (text(), text(), text(), store_path()).prop_map(|(version, logical_root, physical_root, bootstrap)| {
            Response::Welcome {
                version,
                logical_root,
                physical_root,
                bootstrap,
            }
        }),
        text().prop_map(|version| Response::Pong { version }),
        store_path().prop_map(Response::Path),
        any::<bool>().prop_map(Response::Bool),
        proptest::collection::vec(store_path(), 0..4).prop_map(Response::Paths),
        text().prop_map(Response::Name),
        Just(Response::Unit),
        (
            proptest::collection::vec(store_path(), 0..4),
            any::<u64>(),
            proptest::collection::vec(store_path(), 0..2)
        )
            .prop_map(|(deleted, freed_bytes, skipped)| Response::Gc(GcReport {
                deleted,
                freed_bytes,
                skipped
            })),
        (any::<u64>(), proptest::collection::vec(any::<u8>(), 0..64))
            .prop_map(|(count, stream)| Response::Exported { count, stream }),
        (
            proptest::collection::vec(store_path(), 0..4),
            proptest::collection::vec(store_path(), 0..4)
        )
            .prop_map(|(paths, registered)| Response::Imported(ImportReport { paths, registered })),
        realization().prop_map(Response::Realized),
        any::<u64>().prop_map(|spawns| Response::Stats { spawns }),
        (text(), text()).prop_map(|(kind, message)| Response::Error { kind, message }),
    ]
}

proptest! {
    #[test]
    fn requests_roundtrip(req in request()) {
        let mut wire = Vec::new();
        write_frame(&mut wire, &req.encode()).unwrap();
        let len = u32::from_le_bytes(wire[..4].try_into().unwrap()) as usize;
        prop_assert_eq!(len, wire.len() - 4);
        let frame = read_frame(&mut wire.as_slice()).unwrap();
        prop_assert_eq!(Request::decode(&frame).unwrap(), req);
    }

    #[test]
    fn responses_roundtrip(resp in response()) {
        let frame = resp.encode();
        let back = Frame::from_body(frame.to_bytes().unwrap()[4..].to_vec()).unwrap();
        prop_assert_eq!(Response::decode(&back).unwrap(), resp);
    }

    #[test]
    fn truncated_payloads_are_errors(req in request(), cut in any::<prop::sample::Index>()) {
        let frame = req.encode();
        if !frame.payload.is_empty() {
            let n = cut.index(frame.payload.len());
            let short = Frame { opcode: frame.opcode, payload: frame.payload[..n].to_vec() };
            prop_assert!(Request::decode(&short).is_err());
        }
    }

    #[test]
    fn garbage_never_panics(opcode in any::<u8>(), payload in proptest::collection::vec(any::<u8>(), 0..64)) {
        let f = Frame { opcode, payload };
        let _ = Request::decode(&f);
        let _ = Response::decode(&f);
    }
}

#[test]
fn truncated_stream_is_an_io_error() {
    let mut wire = Vec::new();
    write_frame(&mut wire, &Request::Closure(vec![]).encode()).unwrap();
    wire.pop();
    assert!(read_frame(&mut wire.as_slice()).is_err());
}
