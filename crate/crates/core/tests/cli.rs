use std::path::Path;
use std::process::{Command, Output};

use mmel::cli::RunManifest;

fn mmel(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmel"))
        .current_dir(dir)
        .env("MMEL_THREADS", "0")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(mmel(d, &["--help"]).status.code(), Some(0));
    assert_eq!(mmel(d, &["nonsense"]).status.code(), Some(1));
    assert_eq!(mmel(d, &["train", "--bogus-flag"]).status.code(), Some(1));
    std::fs::write(d.join("bad.json"), r#"{"lamda_p": 1.0}"#).unwrap();
    let o = mmel(d, &["train", "--config", "bad.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambda_p"));
    std::fs::write(
        d.join("missing.json"),
        r#"{"dataset": "cifar", "train_path": "nope.bin"}"#,
    )
    .unwrap();
    assert_eq!(
        mmel(d, &["gen-augment", "--config", "missing.json"]).status.code(),
        Some(1)
    );
    std::fs::write(d.join("broken.bin"), vec![0u8; 3072]).unwrap();
    std::fs::write(
        d.join("broken.json"),
        r#"{"dataset": "cifar", "train_path": "broken.bin"}"#,
    )
    .unwrap();
    assert_eq!(
        mmel(d, &["gen-augment", "--config", "broken.json", "--out", "b"])
            .status
            .code(),
        Some(2)
    );
    assert!(!d.join("b").exists());
}

#[test]
fn dry_run_has_no_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["gen-augment", "train", "verify-theorem", "grad-check"] {
        let o = mmel(dir.path(), &[cmd, "--preset", "blobs-smoke", "--dry-run", "--out", "o"]);
        assert_eq!(o.status.code(), Some(0), "{}", cmd);
    }
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn train_then_eval_from_offline_groups() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = mmel(
        d,
        &["gen-augment", "--preset", "blobs-smoke", "--seed", "5", "--out", "g"],
    );
    assert_eq!(o.status.code(), Some(0));
    RunManifest::read_verified(&d.join("g/gen-augment.manifest.json")).unwrap();

    std::fs::write(
        d.join("c.json"),
        r#"{"groups_path": "g/groups.jsonl", "mode": "mmel_hard", "epochs": 4}"#,
    )
    .unwrap();
    let o = mmel(
        d,
        &[
            "train",
            "--preset",
            "blobs-smoke",
            "--config",
            "c.json",
            "--seed",
            "5",
            "--out",
            "t",
            "--strict-determinism",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m = RunManifest::read_verified(&d.join("t/train.manifest.json")).unwrap();
    assert_eq!(m.seed, 5);
    assert_eq!(m.config["train"]["mode"], "mmel_hard");
    assert_eq!(m.inputs.len(), 1);

    let csv = std::fs::read_to_string(d.join("t/metrics.csv")).unwrap();
    let last = csv.lines().last().unwrap();
    assert!(last.starts_with("3,") && last.ends_with(",0.000"), "{}", last);
    let eval_col: f64 = last.split(',').nth(6).unwrap().parse().unwrap();

    let o = mmel(
        d,
        &[
            "eval",
            "--preset",
            "blobs-smoke",
            "--seed",
            "5",
            "--out",
            "e",
            "--checkpoint",
            "t/model.ckpt",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    let score: f64 = stdout(&o)
        .lines()
        .next()
        .unwrap()
        .trim_start_matches("score ")
        .parse()
        .unwrap();
    assert!((score - eval_col).abs() < 1e-6, "{} vs {}", score, eval_col);
}

#[test]
fn verification_commands_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = mmel(dir.path(), &["verify-theorem", "--instances", "50", "--out", "v"]);
    assert_eq!(o.status.code(), Some(0));
    let lines = std::fs::read_to_string(dir.path().join("v/verify-theorem.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 50);
    assert!(stdout(&o).contains("\"passed\":true"));
    let o = mmel(dir.path(), &["grad-check", "--seeds", "2", "--out", "g"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 5);
}
