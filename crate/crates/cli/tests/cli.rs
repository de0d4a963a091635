use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn ssc(work: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssc"))
        .current_dir(root())
        .arg("--config")
        .arg(root().join("crates/cli/tests/fixtures/tiny.toml"))
        .arg("--work-dir")
        .arg(work)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn jsonl_records(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn missing_artifacts_name_the_producing_command() {
    let dir = tempfile::tempdir().unwrap();
    let out = ssc(dir.path(), &["train-sen"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("run `ssc prepare` first"), "{}", stderr(&out));

    assert!(ssc(dir.path(), &["prepare"]).status.success());
    let out = ssc(dir.path(), &["train-sen"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("ssc export-sentence-vectors"), "{}", stderr(&out));

    let out = ssc(dir.path(), &["train-abs"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("ssc extract-embeddings"), "{}", stderr(&out));
}

#[test]
fn config_mismatch_is_refused_unless_allowed() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ssc(dir.path(), &["prepare"]).status.success());
    assert!(ssc(dir.path(), &["export-sentence-vectors"]).status.success());

    let out = ssc(dir.path(), &["--set", "vocab.min_freq=2", "train-sen"]);
    assert!(!out.status.success());
    let msg = stderr(&out);
    assert!(msg.contains("rerun `ssc prepare`") && msg.contains("--allow-config-mismatch"), "{msg}");

    let out = ssc(
        dir.path(),
        &["--set", "vocab.min_freq=2", "--set", "sen.epochs=1", "--allow-config-mismatch", "train-sen"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn nicta_without_dev_file_holds_out_the_tail_of_train() {
    let dir = tempfile::tempdir().unwrap();
    let out = ssc(
        dir.path(),
        &[
            "--dataset",
            "nicta",
            "--set",
            "paths.data_dir=\"crates/cli/tests/fixtures/nicta\"",
            "prepare",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let corpus = dir.path().join("corpus");
    assert_eq!(jsonl_records(&corpus.join("train.jsonl")), 9);
    assert_eq!(jsonl_records(&corpus.join("dev.jsonl")), 1);
    assert_eq!(jsonl_records(&corpus.join("test.jsonl")), 3);
}

#[test]
fn show_config_resolves_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = ssc(dir.path(), &["--seed", "7", "--set", "abs.epochs=5", "show-config"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let value: toml::Value = toml::from_str(&text).unwrap();
    assert_eq!(value["seed"].as_integer(), Some(7));
    assert_eq!(value["abs"]["epochs"].as_integer(), Some(5));
    assert_eq!(value["sen"]["d_p"].as_integer(), Some(16));
}

#[test]
fn bad_overrides_fail() {
    let dir = tempfile::tempdir().unwrap();
    for set in ["sen.no_such_field=1", "abs.labels=[\"A\"]", "encoder.dim=0"] {
        let out = ssc(dir.path(), &["--set", set, "show-config"]);
        assert!(!out.status.success(), "{set} was accepted");
    }
}
