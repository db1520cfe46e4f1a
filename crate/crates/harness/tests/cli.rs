use std::path::Path;
use std::process::{Command, Output};

use pirl_lab::metrics::read_jsonl;

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pirl-lab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, file: &str, body: &str) -> String {
    let path = dir.join(file);
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn theory_command_succeeds_on_a_small_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("theory");
    let o = lab(&[
        "theory",
        "--group-sizes",
        "2,4",
        "--p-grid",
        "0.2:0.8:3",
        "--mc-groups",
        "20000",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("theory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
}

#[test]
fn invalid_config_exits_with_code_two_and_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.json",
        r#"{"schema_version": 1, "group_size": 1, "lambda": -1, "alpha_std": 0}"#,
    );
    let o = lab(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("group_size"), "{err}");
    assert!(err.contains("lambda"), "{err}");
    assert!(err.contains("alpha_std"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "typo.json", r#"{"schema_version": 1, "lamda": 0.1}"#);
    let o = lab(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_file_exits_with_io_code() {
    let o = lab(&["train", "--config", "/nonexistent/config.json"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn verification_diverges_only_after_the_warm_up() {
    let dir = tempfile::tempdir().unwrap();
    let base = r#"{"schema_version": 1, "name": "r", "seed": 11, "batch_size": 4, "group_size": 8,
                   "window": 4, "max_iters": 30, "variant": "VARIANT"}"#;
    let a_cfg = write_config(dir.path(), "a.json", &base.replace("VARIANT", "grpo"));
    let b_cfg = write_config(dir.path(), "b.json", &base.replace("VARIANT", "grpo_pipo"));
    let (a_out, b_out) = (dir.path().join("a"), dir.path().join("b"));
    assert!(lab(&["train", "--config", &a_cfg, "--out", a_out.to_str().unwrap()]).status.success());
    assert!(lab(&["train", "--config", &b_cfg, "--out", b_out.to_str().unwrap()]).status.success());

    let (a_run, b_run) = (a_out.join("r/seed_11"), b_out.join("r/seed_11"));
    let o = lab(&["compare", a_run.to_str().unwrap(), b_run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let a = read_jsonl(&a_run.join("metrics.jsonl")).unwrap();
    let b = read_jsonl(&b_run.join("metrics.jsonl")).unwrap();
    assert_eq!(a.len(), 30);
    let first = a.iter().zip(&b).find(|(x, y)| x.j_exact != y.j_exact).map(|(x, _)| x.t);
    // The first verify step runs at t = K + 1 and moves J from t = K + 2 on.
    assert_eq!(first, Some(6));
    assert!(b.iter().take(4).all(|r| !r.verify_applied));
}

#[test]
fn identical_runs_compare_clean() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"schema_version": 1, "name": "c", "seed": 2, "max_iters": 20, "variant": "dapo_pipo"}"#,
    );
    let out = dir.path().join("o");
    assert!(lab(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let run = out.join("c/seed_2");
    let o = lab(&["compare", run.to_str().unwrap(), run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
