#![allow(dead_code)]

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn recipe_path() -> String {
    fixtures().join("recipes").display().to_string()
}

pub fn recipe_path_with_tests() -> String {
    format!("{}:{}", recipe_path(), fixtures().join("test-recipes").display())
}

/// A state directory plus the environment `hermit` runs with.
pub struct Hermit {
    pub state: PathBuf,
    pub package_path: String,
    pub daemon: bool,
}

pub struct Run {
    pub code: i32,
    pub stdout: Vec<u8>,
    pub stderr: String,
}

impl Run {
    pub fn text(&self) -> String {
        String::from_utf8(self.stdout.clone()).unwrap()
    }

    pub fn lines(&self) -> Vec<String> {
        self.text().lines().map(str::to_string).collect()
    }

    #[track_caller]
    pub fn ok(self) -> Self {
        assert_eq!(self.code, 0, "stderr: {}", self.stderr);
        self
    }
}

impl Hermit {
    pub fn new(state: &Path) -> Self {
        Self {
            state: state.to_path_buf(),
            package_path: recipe_path(),
            daemon: false,
        }
    }

    pub fn profile(&self) -> PathBuf {
        self.state.join("profile")
    }

    fn command(&self, args: &[&str]) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_hermit"));
        if !self.daemon {
            c.arg("--no-daemon");
        }
        c.args(args)
            .env("HERMIT_STATE", &self.state)
            .env("HERMIT_PACKAGE_PATH", &self.package_path)
            .env("HOME", &self.state)
            .env_remove("HERMIT_STORE")
            .env_remove("HERMIT_LOG");
        c
    }

    pub fn run(&self, args: &[&str]) -> Run {
        self.run_with_input(args, &[])
    }

    pub fn run_with_input(&self, args: &[&str], input: &[u8]) -> Run {
        let mut child = self
            .command(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        let mut stdin = child.stdin.take().unwrap();
        stdin.write_all(input).unwrap();
        drop(stdin);
        let Output { status, stdout, stderr } = child.wait_with_output().unwrap();
        Run {
            code: status.code().unwrap_or(-1),
            stdout,
            stderr: String::from_utf8_lossy(&stderr).into_owned(),
        }
    }

    /// `package -p <profile> ARGS...`.
    pub fn package(&self, args: &[&str]) -> Run {
        let profile = self.profile().display().to_string();
        let mut all = vec!["package", "-p", profile.as_str()];
        all.extend_from_slice(args);
        self.run(&all)
    }
}

/// Empties `dir` so the next run starts from a fresh store at the same place.
pub fn wipe(dir: &Path) {
    hermit_core::store::remove_tree(dir).unwrap();
    fs::create_dir_all(dir).unwrap();
}

/// Fixed state directory for byte-exact golden comparisons: rendered
/// paths embed the store root, so it cannot be a random temp dir.
pub const GOLDEN_STATE: &str = "/tmp/hermit-golden";

/// Holds an exclusive lock on the golden state directory.
pub struct GoldenState {
    _lock: File,
    pub hermit: Hermit,
}

pub fn golden_state() -> GoldenState {
    let lock = File::create(format!("{GOLDEN_STATE}.lock")).unwrap();
    lock.lock().unwrap();
    wipe(Path::new(GOLDEN_STATE));
    GoldenState {
        _lock: lock,
        hermit: Hermit::new(Path::new(GOLDEN_STATE)),
    }
}

/// Installs the toolchain and openmpi and returns `--search-paths` output.
pub fn toolchain_search_paths(h: &Hermit) -> Vec<u8> {
    h.package(&["--install", "gcc-toolchain", "openmpi"]).ok();
    h.package(&["--search-paths"]).ok().stdout
}
