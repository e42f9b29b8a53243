//! The binary driven end to end on the bundled fixture.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::time::{Duration, Instant};

use common::{fixture_copy, kdiag, sha256_file, GOLDEN};

fn stderr(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_all_matches_golden_hashes() {
    let dir = fixture_copy();
    let start = Instant::now();
    let out = kdiag(dir.path(), &["run-all"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(start.elapsed() < Duration::from_secs(60));

    let actual: BTreeMap<String, String> = GOLDEN
        .iter()
        .map(|f| (f.to_string(), sha256_file(&dir.path().join("out").join(f))))
        .collect();
    if std::env::var_os("KDIAG_BLESS").is_some() {
        fs::write(common::golden_path(), serde_json::to_string_pretty(&actual).unwrap() + "\n").unwrap();
    }
    let expected: BTreeMap<String, String> =
        serde_json::from_str(&fs::read_to_string(common::golden_path()).unwrap()).unwrap();
    assert_eq!(actual, expected, "rerun with KDIAG_BLESS=1 after an intended change");
    assert!(dir.path().join("out/report/report.md").exists());
    assert!(!dir.path().join("out/.kdiag.lock").exists());
}

#[test]
fn stages_are_idempotent_and_resumable() {
    let dir = fixture_copy();
    assert!(kdiag(dir.path(), &["run-all"]).status.success());
    let deficiencies = dir.path().join("out/diagnose/deficiencies.jsonl");
    let before = sha256_file(&deficiencies);

    let again = kdiag(dir.path(), &["diagnose"]);
    assert!(again.status.success());
    assert!(stdout(&again).contains("skipped"), "{}", stdout(&again));
    assert_eq!(sha256_file(&deficiencies), before);

    let resumed = kdiag(dir.path(), &["run-all", "--resume"]);
    assert_eq!(stdout(&resumed).matches("skipped").count(), 9, "{}", stdout(&resumed));

    // drop everything downstream of retrieve and rebuild it
    let manifest = dir.path().join("out/curriculum/manifest.jsonl");
    let manifest_hash = sha256_file(&manifest);
    for stage in ["diagnose", "plan", "synthesize", "curriculum", "eval-detect", "report"] {
        fs::remove_dir_all(dir.path().join("out").join(stage)).unwrap();
    }
    let rebuilt = kdiag(dir.path(), &["run-all", "--resume"]);
    assert!(rebuilt.status.success(), "{}", stderr(&rebuilt));
    assert_eq!(stdout(&rebuilt).matches("skipped").count(), 3);
    assert_eq!(sha256_file(&deficiencies), before);
    assert_eq!(sha256_file(&manifest), manifest_hash);
}

#[test]
fn stage_outputs_do_not_depend_on_location() {
    let a = fixture_copy();
    let b = fixture_copy();
    assert!(kdiag(a.path(), &["run-all"]).status.success());
    assert!(kdiag(b.path(), &["run-all", "--out-dir", b.path().join("elsewhere").to_str().unwrap()])
        .status
        .success());
    for f in GOLDEN {
        assert_eq!(
            sha256_file(&a.path().join("out").join(f)),
            sha256_file(&b.path().join("elsewhere").join(f)),
            "{f}"
        );
    }
}

#[test]
fn plan_before_diagnose_names_the_missing_stage() {
    let dir = fixture_copy();
    let out = kdiag(dir.path(), &["plan"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("requires diagnose output"), "{}", stderr(&out));
}

#[test]
fn invalid_config_lists_every_problem_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("kdiag.toml"),
        "[retrieval]\nm = 0\n\n[diagnose]\ntau = -0.5\n",
    )
    .unwrap();
    let out = kdiag(dir.path(), &["ingest"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("retrieval.m"), "{err}");
    assert!(err.contains("diagnose.tau"), "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unreachable_scorer_exits_with_backend_code() {
    let dir = fixture_copy();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = fs::read_to_string(dir.path().join("kdiag.toml")).unwrap().replace(
        "[backends.scorer]\nkind = \"mock\"\nscript = \"mock_script.json\"",
        &format!(
            "[backends.scorer]\nkind = \"http\"\nendpoint = \"http://127.0.0.1:{port}\"\nmodel = \"m\"\nretries = 0"
        ),
    );
    assert!(cfg.contains("http://"));
    fs::write(dir.path().join("kdiag.toml"), cfg).unwrap();
    for stage in ["ingest", "embed", "retrieve"] {
        assert!(kdiag(dir.path(), &[stage]).status.success());
    }
    let out = kdiag(dir.path(), &["diagnose"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn second_process_is_locked_out() {
    let dir = fixture_copy();
    fs::create_dir_all(dir.path().join("out")).unwrap();
    fs::write(dir.path().join("out/.kdiag.lock"), "1").unwrap();
    let out = kdiag(dir.path(), &["ingest"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("locked"), "{}", stderr(&out));
}

#[test]
fn seed_flag_reaches_random_detection() {
    let dir = fixture_copy();
    assert!(kdiag(dir.path(), &["run-all", "--seed", "99"]).status.success());
    let runs = fs::read_to_string(dir.path().join("out/eval-detect/runs.jsonl")).unwrap();
    assert!(runs.contains("\"seed\":99"));
}

#[test]
fn template_overrides_are_loaded_and_invalidate_stages() {
    let dir = fixture_copy();
    let tpl = dir.path().join("templates");
    fs::create_dir_all(tpl.join("scoring")).unwrap();
    let builtin = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("templates");
    for f in ["synthesis_reasoning.txt", "synthesis_math.txt", "preprocess_math.txt"] {
        fs::copy(builtin.join(f), tpl.join(f)).unwrap();
    }
    fs::write(tpl.join("scoring/terse.txt"), "{knowledge}Q: {question}\n{options}\nA:").unwrap();
    let cfg = fs::read_to_string(dir.path().join("kdiag.toml")).unwrap().replace(
        "out_dir = \"out\"",
        "out_dir = \"out\"\ntemplates_dir = \"templates\"\n\n[diagnose]\ntemplate = \"terse\"",
    );
    fs::write(dir.path().join("kdiag.toml"), cfg).unwrap();
    let first = kdiag(dir.path(), &["run-all"]);
    assert!(first.status.success(), "{}", stderr(&first));

    let path = tpl.join("synthesis_reasoning.txt");
    let edited = fs::read_to_string(&path).unwrap() + "\nKeep each explanation short.\n";
    fs::write(&path, edited).unwrap();
    let resumed = kdiag(dir.path(), &["run-all", "--resume"]);
    assert!(resumed.status.success(), "{}", stderr(&resumed));
    assert_eq!(stdout(&resumed).matches("skipped").count(), 0, "{}", stdout(&resumed));

    fs::write(tpl.join("scoring/broken.txt"), "no placeholders").unwrap();
    let broken = kdiag(dir.path(), &["diagnose", "--force"]);
    assert_eq!(broken.status.code(), Some(1));
    assert!(stderr(&broken).contains("broken"), "{}", stderr(&broken));
}
