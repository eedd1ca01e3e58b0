//! The `nwn` binary end to end on small inputs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nwn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nwn")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_inspect_encode_train_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = nwn(&["generate", "--case", "forbidden-zone", "--n", "40", "--seed", "3", "--out", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("20 normal, 20 spurious"));

    let out = nwn(&["inspect", "--trajectory", s(&data.join("logs/00000.log"))]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("normal formula: satisfied") || text.contains("normal formula: violated"));
    assert!(text.contains("label agrees with the normal formula"), "{text}");

    let params = tmp.path().join("params.json");
    let out = nwn(&["encode", "--in", s(&data), "--params", s(&params)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("dimension 140"));
    let first = fs::read(data.join("encoded.bin")).unwrap();
    // a second pass reuses the params file and reproduces the cache
    assert!(nwn(&["encode", "--in", s(&data), "--params", s(&params)]).status.success());
    assert!(fs::read(data.join("encoded.bin")).unwrap() == first, "re-encoding changed the cache");

    let run = tmp.path().join("run");
    let cfg = tmp.path().join("cfg.toml");
    fs::write(&cfg, format!("n = 60\nseed = 2\nout = {:?}\n[train]\nmax_epochs = 2\n", s(&run))).unwrap();
    let out = nwn(&["train", "--case", "forbidden-zone", "--config", s(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_loss,val_accuracy\n"));
    assert_eq!(log.lines().count(), 3);
    let report = fs::read_to_string(run.join("report.csv")).unwrap();

    let out = nwn(&["eval", "--checkpoint", s(&run.join("model.ckpt")), "--split", "test"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("F1"));
    // evaluating the saved checkpoint reproduces the report written by train
    assert_eq!(fs::read_to_string(run.join("eval_test.csv")).unwrap(), report);

    // without the data directory the dataset is regenerated and must match
    fs::remove_dir_all(run.join("data")).unwrap();
    let out = nwn(&["eval", "--checkpoint", s(&run.join("model.ckpt"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn validation_failures_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = nwn(&["generate", "--case", "nowhere", "--n", "10", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = nwn(&["generate", "--case", "sequentiality", "--n", "11", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "n = 20\n[train]\nlr = -1.0\n").unwrap();
    let out = nwn(&["train", "--case", "sequentiality", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let out = nwn(&["ablate", "--case", "simultaneity", "--variants", "ours,bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tampered_dataset_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    assert!(nwn(&["generate", "--case", "mutual-exclusion", "--n", "20", "--seed", "1", "--out", s(&data)]).status.success());
    let log = data.join("logs/00003.log");
    let mut text = fs::read_to_string(&log).unwrap();
    text.push('\n');
    fs::write(&log, text).unwrap();
    let out = nwn(&["encode", "--in", s(&data), "--params", s(&tmp.path().join("p.json"))]);
    assert_eq!(out.status.code(), Some(2));
}
