use std::path::Path;
use std::process::{Command, Output};

use calidet::edge::flat_prior;
use calidet::Edge;

fn calidet(dir: &Path, args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_calidet"));
    cmd.args(args).current_dir(dir).env_remove("RUST_LOG").env_remove("CALIDET_SEED");
    if let Some(s) = env_seed {
        cmd.env("CALIDET_SEED", s);
    }
    cmd.output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn help_and_version_succeed() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&calidet(dir.path(), &["--help"], None)), 0);
    assert_eq!(code(&calidet(dir.path(), &["--version"], None)), 0);
    assert_eq!(code(&calidet(dir.path(), &["selfcal", "run", "--help"], None)), 0);
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&calidet(dir.path(), &["edges"], None)), 1);
    assert_eq!(
        code(&calidet(dir.path(), &["edges", "flat", "--k", "many", "--out", "x.json"], None)),
        1
    );
    // Semantic configuration errors share the usage code.
    assert_eq!(
        code(&calidet(dir.path(), &["edges", "flat", "--k", "0", "--out", "x.json"], None)),
        1
    );
    assert_eq!(
        code(&calidet(dir.path(), &["world", "gen", "--k", "3", "--out", "w.json"], Some("nope"))),
        1
    );
    assert_eq!(
        code(&calidet(
            dir.path(),
            &["--seed", "1", "world", "gen", "--k", "3", "--out", "w.json"],
            Some("nope")
        )),
        0
    );
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = calidet(
        dir.path(),
        &["edges", "stats", "--annotations", "missing.json", "--out", "e.json"],
        None,
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
    std::fs::write(dir.path().join("bad.json"), "[[1, 0.2], [0.2]]").unwrap();
    assert_eq!(
        code(&calidet(
            dir.path(),
            &["edges", "flip", "--in", "bad.json", "--out", "f.json"],
            None
        )),
        2
    );
}

#[test]
fn divergent_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"k": 4, "d": 4, "epochs": 2, "train_images": 64, "test_images": 32, "optimizer": "sgd", "learning_rate": 1e200, "grad_clip": null}"#;
    std::fs::write(dir.path().join("cfg.json"), cfg).unwrap();
    let out = calidet(dir.path(), &["train", "toy", "--config", "cfg.json", "--metrics", "m.jsonl"], None);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn edge_commands_compose() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(calidet(p, &["edges", "flat", "--k", "3", "--out", "flat.json"], None)
        .status
        .success());
    assert_eq!(Edge::read(p.join("flat.json")).unwrap(), flat_prior(3).unwrap());
    assert!(calidet(p, &["edges", "flip", "--in", "flat.json", "--out", "flip.json"], None)
        .status
        .success());
    let out = calidet(p, &["edges", "compare", "flat.json", "flip.json"], None);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("0"));
    assert!(calidet(p, &["edges", "csv", "--in", "flat.json", "--out", "flat.csv"], None)
        .status
        .success());
    let csv = std::fs::read_to_string(p.join("flat.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let gen = |out: &str, flag: Option<&str>, env: Option<&str>| {
        let mut args = vec![];
        if let Some(s) = flag {
            args.extend(["--seed", s]);
        }
        args.extend(["world", "gen", "--k", "5", "--out", out]);
        assert!(calidet(p, &args, env).status.success());
        std::fs::read(p.join(out)).unwrap()
    };
    let flag = gen("a.json", Some("11"), Some("12"));
    let env = gen("b.json", None, Some("11"));
    let other = gen("c.json", None, Some("12"));
    let default = gen("d.json", None, None);
    assert_eq!(flag, env);
    assert_ne!(flag, other);
    assert_ne!(default, other);
}

#[test]
fn training_config_seed_is_used_unless_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let cfg = r#"{"k": 4, "d": 4, "epochs": 1, "train_images": 64, "test_images": 32, "seed": 5}"#;
    std::fs::write(p.join("cfg.json"), cfg).unwrap();
    let run = |args: &[&str]| {
        let out = calidet(p, args, None);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    assert!(run(&["train", "toy", "--config", "cfg.json", "--metrics", "m.jsonl"]).starts_with("seed 5:"));
    assert!(run(&["--seed", "9", "train", "toy", "--config", "cfg.json", "--metrics", "m.jsonl"]).starts_with("seed 9:"));
}
