#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub const FIXTURE_FILES: [&str; 4] = ["facts.jsonl", "queries.jsonl", "mock_script.json", "kdiag.toml"];

/// Copies the bundled fixture into a fresh temp dir.
pub fn fixture_copy() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    for f in FIXTURE_FILES {
        std::fs::copy(fixture_dir().join(f), dir.path().join(f)).unwrap();
    }
    dir
}

pub fn kdiag(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdiag"))
        .arg("--config")
        .arg(dir.join("kdiag.toml"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

pub fn sha256_file(path: &Path) -> String {
    kdiag::hashing::file_sha256(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Artifacts pinned by the golden-hash file, relative to the output dir.
pub const GOLDEN: [&str; 3] = [
    "diagnose/deficiencies.jsonl",
    "curriculum/manifest.jsonl",
    "eval-detect/detection_report.json",
];

pub fn golden_path() -> PathBuf {
    fixture_dir().join("golden_hashes.json")
}
