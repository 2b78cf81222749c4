use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn finegrain(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_finegrain"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn generate(dir: &Path, out: &str, seed: &str) -> Output {
    finegrain(&["--seed", seed, "generate", "--duration-ms", "1500", "--traces", "1", "--out", out], dir)
}

#[test]
fn version_and_help_succeed() {
    let tmp = tempfile::tempdir().unwrap();
    let v = finegrain(&["--version"], tmp.path());
    assert!(v.status.success());
    assert!(String::from_utf8_lossy(&v.stdout).contains(env!("CARGO_PKG_VERSION")));
    assert!(finegrain(&["--help"], tmp.path()).status.success());
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(finegrain(&["frobnicate"], tmp.path()).status.code(), Some(1));
    assert_eq!(finegrain(&["generate", "--zoom", "many"], tmp.path()).status.code(), Some(1));
    assert_eq!(finegrain(&[], tmp.path()).status.code(), Some(1));
    assert_eq!(finegrain(&["--config", "missing.toml", "generate"], tmp.path()).status.code(), Some(1));
    fs::write(tmp.path().join("bad.toml"), "zooom = 3\n").unwrap();
    assert_eq!(finegrain(&["--config", "bad.toml", "generate"], tmp.path()).status.code(), Some(1));
}

#[test]
fn generate_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(generate(tmp.path(), "a", "3").status.success());
    assert!(generate(tmp.path(), "b", "3").status.success());
    assert!(generate(tmp.path(), "c", "4").status.success());
    for name in ["train.jsonl", "val.jsonl", "test.jsonl"] {
        let a = fs::read(tmp.path().join("a").join(name)).unwrap();
        assert_eq!(a, fs::read(tmp.path().join("b").join(name)).unwrap(), "{name}");
    }
    let a = fs::read(tmp.path().join("a/train.jsonl")).unwrap();
    assert_ne!(a, fs::read(tmp.path().join("c/train.jsonl")).unwrap());
}

#[test]
fn manifest_replay_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(generate(tmp.path(), "d", "5").status.success());
    let original = fs::read(tmp.path().join("d/train.jsonl")).unwrap();
    let manifest = fs::read_to_string(tmp.path().join("d/manifest.json")).unwrap();
    fs::remove_file(tmp.path().join("d/train.jsonl")).unwrap();
    let out = finegrain(&["--manifest", "d/manifest.json"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(tmp.path().join("d/train.jsonl")).unwrap(), original);
    assert_eq!(fs::read_to_string(tmp.path().join("d/manifest.json")).unwrap(), manifest);
    // a manifest replay takes no subcommand
    assert_eq!(finegrain(&["--manifest", "d/manifest.json", "generate"], tmp.path()).status.code(), Some(1));
}

#[test]
fn empty_input_fails_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(generate(tmp.path(), "d", "1").status.success());
    let text = fs::read_to_string(tmp.path().join("d/test.jsonl")).unwrap();
    let header = text.lines().next().unwrap();
    fs::write(tmp.path().join("empty.jsonl"), format!("{header}\n")).unwrap();
    let out = finegrain(&["impute", "--method", "linear", "--input", "empty.jsonl", "--output", "o/lin.jsonl"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no windows"));
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn linear_impute_then_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(generate(tmp.path(), "d", "2").status.success());
    let imp = finegrain(
        &["impute", "--method", "linear", "--input", "d/test.jsonl", "--output", "o/lin.jsonl", "--enforce"],
        tmp.path(),
    );
    assert!(imp.status.success(), "{}", String::from_utf8_lossy(&imp.stderr));
    assert!(tmp.path().join("o/lin.repair.csv").exists());
    let ev = finegrain(
        &["evaluate", "--truth", "d/test.jsonl", "--method", "linear=o/lin.jsonl", "--method", "truth=d/test.jsonl", "--out", "e"],
        tmp.path(),
    );
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    let raw = fs::read_to_string(tmp.path().join("e/metrics_raw.csv")).unwrap();
    assert!(raw.starts_with("method,mse,emd"));
    assert_eq!(raw.lines().count(), 3);
    assert!(tmp.path().join("e/metrics_normalized.csv").exists());
    let viol = fs::read_to_string(tmp.path().join("e/violations.csv")).unwrap();
    // the truth satisfies every constraint
    assert!(viol.lines().filter(|l| l.starts_with("truth,")).all(|l| l.split(',').nth(4) == Some("0")));
    let bad = finegrain(&["evaluate", "--truth", "d/test.jsonl", "--method", "lin"], tmp.path());
    assert_eq!(bad.status.code(), Some(1));
}
