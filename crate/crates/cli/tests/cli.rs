use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sfd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfd")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sfd(args);
    assert!(out.status.success(), "sfd {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("sfd-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bad_flags_exit_with_usage_code() {
    assert_eq!(sfd(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(sfd(&["run", "--scenario", "builtin:S010"]).status.code(), Some(2));
    assert_eq!(sfd(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn response_corpus_parses_cleanly() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/responses");
    let text = ok(&["parse-corpus", s(&dir)]);
    assert!(text.contains(" 0 mismatches"), "{text}");
}

#[test]
fn pipeline_is_reproducible() {
    let dir = scratch("pipeline");
    let data = dir.join("demos.jsonl.gz");
    ok(&["collect", "--routes", "3", "--seed", "4", "--out", s(&data)]);

    let mut checkpoints = Vec::new();
    for i in 0..2 {
        let model = dir.join(format!("m{i}.sfd"));
        ok(&["train", "--data", s(&data), "--out", s(&model), "--epochs", "1", "--seed", "9"]);
        checkpoints.push(std::fs::read(&model).unwrap());
    }
    assert_eq!(checkpoints[0], checkpoints[1]);

    let model = dir.join("m0.sfd");
    let run = |planner: &str| {
        ok(&["run", "--scenario", "builtin:S010", "--model", s(&model), "--planner", planner, "--latency", "0.5", "--seed", "3"])
    };
    let first = run("oracle");
    assert_eq!(first, run("oracle"));
    let summary: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert!(summary.get("termination").is_some(), "{first}");
    assert_eq!(run("solo"), run("solo"));

    let eval = || {
        ok(&["eval", "--model", s(&model), "--scenario", "builtin:S010", "--planner", "solo", "--trials", "2", "--seed", "5"])
    };
    let report = eval();
    assert!(!report.trim().is_empty());
    assert_eq!(report, eval());
    std::fs::remove_dir_all(&dir).ok();
}
