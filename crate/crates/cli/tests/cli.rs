//! Drives the `dlf` binary through every subcommand on tiny problems.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "task": "classification",
  "data": {"source": "synth", "kind": "blobs", "params": {"n": 90}},
  "teacher": {"members": 3, "hidden": [12], "epochs": 15, "lr": 0.01},
  "student": {"hidden": [12], "q": 2, "pretrain": {"epochs": 10}, "em": {"epochs": 10, "lr": 0.01}},
  "seeds": [0, 1],
  "write_csv": true
}"#;

fn dlf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlf"))
        .current_dir(dir)
        .env_remove("DLF_OUT_DIR")
        .env_remove("DLF_CONFIG")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = dlf(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), TINY).unwrap();
    dir
}

#[test]
fn run_is_byte_identical_across_invocations() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["run", "--config", "cfg.json", "--out-dir", "a"]);
    let out = Command::new(env!("CARGO_BIN_EXE_dlf"))
        .current_dir(d)
        .env("DLF_OUT_DIR", "b")
        .args(["run", "--config", "cfg.json"])
        .output()
        .unwrap();
    assert!(out.status.success());
    for name in [
        "report-seed-0.json",
        "report-seed-1.json",
        "report-aggregate.json",
        "report.csv",
    ] {
        let a = fs::read(d.join("a").join(name)).unwrap();
        let b = fs::read(d.join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs");
    }
}

#[test]
fn overrides_reach_the_report() {
    let dir = setup();
    let d = dir.path();
    ok(
        d,
        &[
            "run",
            "--config",
            "cfg.json",
            "--out-dir",
            "o",
            "--q",
            "3",
            "--lambda",
            "0",
            "--design",
            "new-mixup",
            "--design-ratio",
            "0.5",
            "--em-mode",
            "full-batch",
            "--init",
            "random",
            "--seeds",
            "4",
        ],
    );
    let text = fs::read_to_string(d.join("o/report-aggregate.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let s = &v["settings"];
    assert_eq!(s["q"], 3);
    assert_eq!(s["lambda"], 0.0);
    assert_eq!(s["design"], "new-mixup");
    assert_eq!(s["em_mode"], "full-batch");
    assert_eq!(s["init"], "random");
    assert_eq!(v["seeds"], serde_json::json!([4]));
    assert!(d.join("o/report-seed-4.json").exists());
}

#[test]
fn stages_chain_through_files() {
    let dir = setup();
    let d = dir.path();
    ok(
        d,
        &[
            "gen-synth",
            "--kind",
            "blobs",
            "--n",
            "90",
            "--out",
            "b.csv",
            "--truth",
            "t.json",
        ],
    );
    ok(d, &["gen-synth", "--kind", "flip-blobs", "--n", "90", "--out", "f.csv"]);
    let truth: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("t.json")).unwrap()).unwrap();
    assert_eq!(truth["kind"], "blobs");
    ok(
        d,
        &[
            "train-teachers",
            "--data",
            "b.csv",
            "--task",
            "classification",
            "--config",
            "cfg.json",
            "--out",
            "te.json",
        ],
    );
    ok(
        d,
        &[
            "distill",
            "--teachers",
            "te.json",
            "--pool",
            "b.csv",
            "--config",
            "cfg.json",
            "--out",
            "st.json",
            "--report",
            "dr.json",
        ],
    );
    let out = ok(
        d,
        &[
            "evaluate",
            "--teachers",
            "te.json",
            "--student",
            "st.json",
            "--data",
            "b.csv",
            "--config",
            "cfg.json",
        ],
    );
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["teacher_accuracy", "student_accuracy", "student_nll", "student_ece"] {
        assert!(metrics[key].is_number(), "{key}");
    }
    ok(
        d,
        &[
            "shift-adapt",
            "--student",
            "st.json",
            "--data",
            "f.csv",
            "--epochs",
            "20",
            "--out",
            "head.json",
            "--report",
            "ar.json",
        ],
    );
    assert!(fs::read_to_string(d.join("head.json")).unwrap().contains("body_hash"));
    ok(
        d,
        &[
            "ood-score",
            "--student",
            "st.json",
            "--in",
            "b.csv",
            "--out-of",
            "f.csv",
            "--samples",
            "8",
            "--out",
            "ood.json",
        ],
    );
    // identical features on both sides: the two MI samples coincide
    let ood: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ood.json")).unwrap()).unwrap();
    assert_eq!(ood["auroc"], 0.5);
    ok(
        d,
        &[
            "sample",
            "--student",
            "st.json",
            "--data",
            "b.csv",
            "--count",
            "2",
            "--out",
            "s.csv",
        ],
    );
    let samples = fs::read_to_string(d.join("s.csv")).unwrap();
    assert!(samples.starts_with("member,point,p0,p1,p2\n"));
    assert_eq!(samples.lines().count(), 1 + 2 * 90);
}

#[test]
fn failures_are_labelled_by_stage() {
    let dir = setup();
    let d = dir.path();

    let out = dlf(d, &["train-teachers", "--data", "missing.csv", "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: data:"));

    fs::write(d.join("bad.csv"), "a,y\n1,2\n3,\n").unwrap();
    let out = dlf(d, &["train-teachers", "--data", "bad.csv", "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3, column 2"));

    let out = dlf(d, &["run", "--config", "cfg.json", "--q", "0", "--out-dir", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));

    // a regression student cannot do head adaptation
    ok(
        d,
        &[
            "gen-synth",
            "--kind",
            "linear-regression",
            "--n",
            "60",
            "--out",
            "l.csv",
        ],
    );
    ok(
        d,
        &[
            "train-teachers",
            "--data",
            "l.csv",
            "--config",
            "cfg.json",
            "--out",
            "te.json",
        ],
    );
    ok(
        d,
        &[
            "distill",
            "--teachers",
            "te.json",
            "--pool",
            "l.csv",
            "--config",
            "cfg.json",
            "--out",
            "st.json",
        ],
    );
    let out = dlf(
        d,
        &[
            "shift-adapt",
            "--student",
            "st.json",
            "--data",
            "l.csv",
            "--out",
            "h.json",
        ],
    );
    assert!(!out.status.success());

    fs::write(d.join("broken.json"), "{\"version\": 1").unwrap();
    let out = dlf(
        d,
        &[
            "evaluate",
            "--teachers",
            "broken.json",
            "--student",
            "st.json",
            "--data",
            "l.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn malformed_config_is_a_config_failure() {
    let dir = setup();
    let d = dir.path();
    fs::write(d.join("bad.json"), "{\"seeds\": [1,").unwrap();
    let out = dlf(d, &["run", "--config", "bad.json", "--out-dir", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: config:"));
}
