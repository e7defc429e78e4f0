use std::path::PathBuf;
use std::process::{Command, Output};

fn bigsql(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bigsql")).args(args).output().unwrap()
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/mini")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn plan_validate_accepts_fixture() {
    let out = bigsql(&["plan", "validate", fixtures().join("plan.json").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("plan ok"));
}

#[test]
fn plan_validate_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    std::fs::write(
        &plan,
        r#"{"suite": "nowhere", "repetitions": 0,
            "backends": [{"kind": "replay", "model_id": "x", "scripts_dir": "none"}],
            "pricing": {"models": []}}"#,
    )
    .unwrap();
    let out = bigsql(&["plan", "validate", plan.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for needle in ["repetitions", "no pricing entry", "scripts directory", "suite manifest"] {
        assert!(err.contains(needle), "{needle} missing from {err}");
    }
}

#[test]
fn generate_then_materialize_tpch_goldens() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("tpch-suite");
    let out = bigsql(&["data", "generate", "--scale-factor", "0.001", "--seed", "3", "--out", root.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("lineitem=6000"));
    assert!(root.join("tpch/sf0.001/lineitem.schema").is_file());

    let cache = dir.path().join("goldens");
    let out = bigsql(&[
        "goldens",
        "materialize",
        root.to_str().unwrap(),
        "--scale-factor",
        "0.001",
        "--cache",
        cache.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}\n{}", stdout(&out), String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    for q in ["tpch-q1", "tpch-q17", "tpch-q18", "tpch-q21"] {
        assert!(text.contains(q), "{q} missing from {text}");
    }
    assert!(text.contains("tpch-q1: 4 rows"));
    assert_eq!(std::fs::read_dir(&cache).unwrap().count(), 4);
}

#[test]
fn generate_rejects_out_of_range_scale() {
    let dir = tempfile::tempdir().unwrap();
    let out = bigsql(&["data", "generate", "--scale-factor", "5", "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn report_rejects_unknown_format() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let run = bigsql(&[
        "run",
        fixtures().join("plan.json").to_str().unwrap(),
        "--output-dir",
        run_dir.to_str().unwrap(),
        "--repetitions",
        "1",
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(stdout(&run).contains("10 episodes recorded"));
    let out = bigsql(&["report", run_dir.to_str().unwrap(), "--format", "pdf"]);
    assert!(!out.status.success());
    let out = bigsql(&["report", run_dir.join("records.jsonl").to_str().unwrap(), "--format", "markdown"]);
    assert!(out.status.success());
    assert!(run_dir.join("report/report.md").is_file());
}
