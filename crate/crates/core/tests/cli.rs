// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tensor-equiv"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn tensor-equiv")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, name: &str, bug: Option<&str>) -> (PathBuf, PathBuf) {
    let (a, b) = (dir.join(format!("{name}.a.json")), dir.join(format!("{name}.b.json")));
    let mut args = vec!["fixtures", "gen", "--name", name, "--out-a", s(&a), "--out-b", s(&b)];
    if let Some(bug) = bug {
        args.extend(["--bug", bug]);
    }
    let out = run(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    (a, b)
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn equivalent_pair_exits_zero_and_emits_rules() {
    let dir = TempDir::new().unwrap();
    let (a, b) = gen(dir.path(), "fig2-linear", None);
    let rules = dir.path().join("rules.txt");
    let out = run(&[
        "verify",
        "--graph-a",
        s(&a),
        "--graph-b",
        s(&b),
        "--emit-rules",
        s(&rules),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.starts_with("verdict: EQUIVALENT\n"), "{text}");
    assert!(text.contains("rule "), "{text}");
    let catalogue = std::fs::read_to_string(&rules).unwrap();
    assert!(catalogue.contains("addmm"), "{catalogue}");

    // reusing the emitted catalogue needs no synthesis
    let again = run(&[
        "verify",
        "--graph-a",
        s(&a),
        "--graph-b",
        s(&b),
        "--seed-rules",
        s(&rules),
        "--report",
        "lines",
    ]);
    assert_eq!(again.status.code(), Some(0));
    let lines = stdout(&again);
    assert!(lines.contains("stat synthesis_attempts 0\n"), "{lines}");
}

#[test]
fn buggy_pair_exits_one_with_mismatch_report() {
    let dir = TempDir::new().unwrap();
    let (a, b) = gen(dir.path(), "gpt2-fragment", Some("missing-attn-scale"));
    let out = run(&["verify", "--graph-a", s(&a), "--graph-b", s(&b)]);
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    assert!(text.starts_with("verdict: NOT_EQUIVALENT\n"), "{text}");
    assert!(text.contains("mismatch:"), "{text}");
    assert!(
        text.contains("(scaled_dot_product_attention)") && text.contains("(fused_attention)"),
        "{text}"
    );
}

#[test]
fn lines_report_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b) = gen(dir.path(), "transposed-weights", None);
    let args = ["verify", "--graph-a", s(&a), "--graph-b", s(&b), "--report", "lines"];
    let (x, y) = (run(&args), run(&args));
    assert_eq!(x.status.code(), Some(0));
    assert_eq!(stdout(&x), stdout(&y));
    assert!(stdout(&x).starts_with("verdict EQUIVALENT\n"));
}

#[test]
fn errors_exit_three() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.json");
    let out = run(&["verify", "--graph-a", s(&missing), "--graph-b", s(&missing)]);
    assert_eq!(out.status.code(), Some(3));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"nodes\": 7}").unwrap();
    assert_eq!(
        run(&["verify", "--graph-a", s(&bad), "--graph-b", s(&bad)])
            .status
            .code(),
        Some(3)
    );

    let a = dir.path().join("a.json");
    let unknown = run(&[
        "fixtures",
        "gen",
        "--name",
        "resnet",
        "--out-a",
        s(&a),
        "--out-b",
        s(&a),
    ]);
    assert_eq!(unknown.status.code(), Some(3));
    assert_eq!(run(&["verify"]).status.code(), Some(3));
}

#[test]
fn mismatched_output_counts_are_an_error() {
    let dir = TempDir::new().unwrap();
    let (a, _) = gen(dir.path(), "fig2-linear", None);
    let (_, b) = gen(dir.path(), "split-chunk", None);
    let out = run(&["verify", "--graph-a", s(&a), "--graph-b", s(&b)]);
    assert_eq!(out.status.code(), Some(3), "{}", stdout(&out));
}
