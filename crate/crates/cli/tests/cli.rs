mod common;

use std::fs;

use common::*;

#[test]
fn build_prints_one_rendered_path() {
    let dir = tempfile::tempdir().unwrap();
    let h = Hermit::new(dir.path());
    let r = h.run(&["build", "openmpi"]).ok();
    let lines = r.lines();
    assert_eq!(lines.len(), 1);
    let store = dir.path().join("store").display().to_string();
    assert!(lines[0].starts_with(&format!("{store}/")), "{}", lines[0]);
    assert!(lines[0].ends_with("-openmpi-1.8.1"));
    assert!(fs::metadata(&lines[0]).unwrap().is_dir());
    // Same state, same flags: same bytes.
    assert_eq!(h.run(&["build", "openmpi"]).ok().stdout, r.stdout);
}

#[test]
fn unknown_packages_get_suggestions_and_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let h = Hermit::new(dir.path());
    let r = h.run(&["build", "opnempi"]);
    assert_eq!(r.code, 1);
    assert!(r.stdout.is_empty());
    assert!(r.stderr.contains("did you mean openmpi"), "{}", r.stderr);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let h = Hermit::new(dir.path());
    assert_eq!(h.run(&["frobnicate"]).code, 2);
    assert_eq!(h.run(&["package"]).code, 2);
    assert_eq!(h.run(&["build", "-j", "0", "hello"]).code, 2);
    assert_eq!(h.run(&["rewrite", "starpu", "--replace", "hwloc", "--then", "graph"]).code, 2);
    assert_eq!(h.run(&["build", "@1.0"]).code, 2);
    assert_eq!(h.package(&["--roll-back", "--switch-generation", "1"]).code, 2);
    assert_eq!(h.run(&["archive", "--export", "/not/a/store/path"]).code, 2);
}

#[test]
fn graph_refs_lists_the_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let h = Hermit::new(dir.path());
    let r = h.run(&["graph", "openmpi", "--refs"]).ok();
    assert_eq!(r.text(), "(\"hwloc-1.10.1\" \"gfortran-4.8.5\" \"pkg-config-0.28\")\n");
}

#[test]
fn dot_output_labels_nodes_and_edges() {
    let dir = tempfile::tempdir().unwrap();
    let h = Hermit::new(dir.path());
    let text = h.run(&["graph", "chameleon", "--dot"]).ok().text();
    assert!(text.starts_with("digraph \"chameleon-0.9.0\" {\n"));
    assert!(text.ends_with("}\n"));
    let nodes: Vec<&str> = text.lines().filter(|l| l.contains("[label=") && !l.contains("->")).collect();
    // hwloc is shared by starpu and openmpi: one node.
    assert_eq!(nodes.len(), 6, "{text}");
    assert_eq!(text.matches("label=\"hwloc-1.10.1\"").count(), 1);
    assert!(text.contains("[label=\"mpi\"]"));
    assert_eq!(text.lines().filter(|l| l.contains("->")).count(), 6);
}

#[test]
fn rewrite_swaps_inputs_at_depth() {
    let dir = tempfile::tempdir().unwrap();
    let h = Hermit::new(dir.path());
    let tree = h
        .run(&["rewrite", "chameleon", "--replace", "mpi=mpich2", "--then", "graph"])
        .ok()
        .text();
    assert!(tree.contains("mpich2-1.4.1 [mpi]"), "{tree}");
    assert!(!tree.contains("openmpi"));
    let plain = h.run(&["build", "chameleon"]).ok().text();
    let swapped = h
        .run(&["rewrite", "chameleon", "--replace", "mpi=mpich2", "--then", "build"])
        .ok()
        .text();
    assert_ne!(plain, swapped);
    assert!(swapped.trim_end().ends_with("-chameleon-0.9.0"));
    let r = h.run(&["rewrite", "hello", "--replace", "nothing=hwloc", "--then", "graph"]).ok();
    assert!(r.stderr.contains("no input labeled"));
}

#[test]
fn search_paths_match_the_golden_file() {
    let g = golden_state();
    let out = toolchain_search_paths(&g.hermit);
    let golden = fs::read(fixtures().join("golden/search-paths.txt")).unwrap();
    assert_eq!(String::from_utf8_lossy(&out), String::from_utf8_lossy(&golden));
    // The lines name the current generation's item.
    let listing = g.hermit.package(&["--list-generations"]).ok().text();
    let item = listing.lines().next().unwrap().split('\t').nth(1).unwrap().to_string();
    assert!(String::from_utf8(out).unwrap().lines().all(|l| l.contains(&format!("\"{item}/"))));
}

#[test]
fn list_generations_marks_the_current_one() {
    let dir = tempfile::tempdir().unwrap();
    let h = Hermit::new(dir.path());
    h.package(&["-i", "hwloc"]).ok();
    h.package(&["-i", "gfortran"]).ok();
    h.package(&["--roll-back"]).ok();
    let text = h.package(&["--list-generations"]).ok().text();
    let heads: Vec<&str> = text.lines().filter(|l| l.starts_with("Generation")).collect();
    assert_eq!(heads.len(), 2);
    assert!(heads[0].ends_with("(current)"));
    assert!(!heads[1].ends_with("(current)"));
    assert!(text.contains("  hwloc\t1.10.1\n"));
    let r = h.package(&["-r", "pkg-config"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("not installed"));
}

#[test]
fn pure_environment_hides_the_host() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("env.out");
    let cmd = format!("echo \"$PATH|$SECRET\" > {}; gfortran >> {}", dump.display(), dump.display());
    let r = std::process::Command::new(env!("CARGO_BIN_EXE_hermit"))
        .args(["--no-daemon", "environment", "openmpi", "--pure", "--", &cmd])
        .env("HERMIT_STATE", dir.path())
        .env("HERMIT_PACKAGE_PATH", recipe_path())
        .env("SECRET", "leak")
        .status()
        .unwrap();
    assert!(r.success());
    let text = fs::read_to_string(&dump).unwrap();
    let (first, second) = text.split_once('\n').unwrap();
    assert!(first.ends_with("|"), "{first}");
    assert!(first.contains("-environment/bin"));
    assert_eq!(second, "GNU Fortran 4.8.5\n");

    let status = std::process::Command::new(env!("CARGO_BIN_EXE_hermit"))
        .args(["--no-daemon", "environment", "openmpi", "--", "exit 3"])
        .env("HERMIT_STATE", dir.path())
        .env("HERMIT_PACKAGE_PATH", recipe_path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn archive_export_then_import_into_a_fresh_store() {
    let dir = tempfile::tempdir().unwrap();
    let h = Hermit::new(dir.path());
    let out = h.run(&["build", "hello"]).ok().text();
    let stream = h.run(&["archive", "--export", out.trim_end()]).ok().stdout;
    wipe(dir.path());
    let listed = h.run_with_input(&["archive", "--import"], &stream).ok().lines();
    assert_eq!(listed.last().unwrap(), out.trim_end());
    assert_eq!(listed.len(), 3);
    // Only the source fetch, outside the output's closure, runs again.
    let r = h.run(&["-v", "build", "hello"]).ok();
    assert!(r.stderr.contains("hello-2.10: 1 built, 2 cached"), "{}", r.stderr);
    let mut bad = stream.clone();
    let n = bad.len();
    bad[n - 1] ^= 0xff;
    assert_eq!(h.run_with_input(&["archive", "--import"], &bad).code, 1);
}

#[test]
fn gc_keeps_rooted_builds() {
    let dir = tempfile::tempdir().unwrap();
    let h = Hermit::new(dir.path());
    let kept = h.run(&["build", "--root", "hello", "hello"]).ok().text();
    let dropped = h.run(&["build", "hwloc"]).ok().text();
    let deleted = h.run(&["gc"]).ok().lines();
    assert!(deleted.contains(&dropped.trim_end().to_string()));
    assert!(!deleted.contains(&kept.trim_end().to_string()));
    assert!(fs::metadata(kept.trim_end()).is_ok());
    assert!(h.run(&["gc"]).ok().stdout.is_empty());
}

#[test]
fn verbose_prints_the_configuration_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let h = Hermit::new(dir.path());
    let r = h.run(&["-v", "graph", "hello", "--refs"]).ok();
    assert!(r.stderr.contains(&format!("state directory: {}", dir.path().display())));
    assert!(r.stderr.contains("backend: in-process"));
    assert_eq!(r.text(), "(\"libgreet-1.0\")\n");
    let r = std::process::Command::new(env!("CARGO_BIN_EXE_hermit"))
        .args(["--no-daemon", "-v", "--store", "/elsewhere/store", "graph", "hello"])
        .env("HERMIT_STATE", dir.path())
        .env("HERMIT_STORE", "/from/env")
        .env("HERMIT_PACKAGE_PATH", recipe_path())
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&r.stderr).contains("store: /elsewhere/store"));
}

#[test]
fn missing_daemon_is_reported_with_the_socket() {
    let dir = tempfile::tempdir().unwrap();
    let mut h = Hermit::new(dir.path());
    h.daemon = true;
    let r = h.run(&["build", "hello"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("daemon not running"), "{}", r.stderr);
    assert!(r.stderr.contains(&dir.path().join("daemon.socket").display().to_string()));
}

/// The same script, in-process and through a daemon, over fresh stores
/// at the same location.
#[test]
fn daemon_and_in_process_behave_identically() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixtures().join("manifest.json").display().to_string();
    let script: Vec<Vec<String>> = [
        "build --root greeting hello",
        "build openmpi chameleon",
        "build opnempi",
        "build --check hello",
        "package -p PROFILE -i hwloc gfortran",
        "package -p PROFILE -r gfortran",
        "package -p PROFILE --manifest MANIFEST",
        "package -p PROFILE --roll-back",
        "package -p PROFILE --list-generations",
        "package -p PROFILE --switch-generation 3",
        "package -p PROFILE --search-paths",
        "package -p PROFILE --switch-generation 9",
        "rewrite chameleon --replace mpi=mpich2 --then build",
        "graph starpu-with-simgrid",
        "gc",
        "environment hwloc --pure -- exit 4",
    ]
    .iter()
    .map(|line| {
        line.split(' ')
            .map(|w| {
                w.replace("PROFILE", &dir.path().join("profile").display().to_string())
                    .replace("MANIFEST", &manifest)
            })
            .collect()
    })
    .collect();

    let play = |h: &Hermit| -> Vec<(i32, Vec<u8>)> {
        script
            .iter()
            .map(|args| {
                let args: Vec<&str> = args.iter().map(String::as_str).collect();
                let r = h.run(&args);
                (r.code, r.stdout)
            })
            .collect()
    };

    let mut h = Hermit::new(dir.path());
    let local = play(&h);
    let export_local = {
        let path = String::from_utf8(local[0].1.clone()).unwrap();
        h.run(&["archive", "--export", path.trim_end()]).ok().stdout
    };
    wipe(dir.path());

    let config = hermit_daemon::store_config(dir.path(), None).unwrap();
    let daemon = hermit_daemon::spawn(config, &hermit_daemon::socket_path(dir.path())).unwrap();
    h.daemon = true;
    let remote = play(&h);
    let export_remote = {
        let path = String::from_utf8(remote[0].1.clone()).unwrap();
        h.run(&["archive", "--export", path.trim_end()]).ok().stdout
    };
    for (i, (l, r)) in local.iter().zip(&remote).enumerate() {
        assert_eq!(l.0, r.0, "exit code of `{}`", script[i].join(" "));
        assert_eq!(
            String::from_utf8_lossy(&l.1),
            String::from_utf8_lossy(&r.1),
            "stdout of `{}`",
            script[i].join(" ")
        );
    }
    assert_eq!(export_local, export_remote);
    let codes: Vec<i32> = local.iter().map(|(c, _)| *c).collect();
    assert_eq!(codes, [0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 4]);
    assert!(daemon.spawns() > 0);
}
