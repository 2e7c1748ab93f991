use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn lcslab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcslab")).args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn scm(samples: usize, family: &str) -> Value {
    json!({
        "d_c": 1, "d_s": 1, "d_x": 2, "num_domains": 5, "target_domain": 4,
        "samples_per_domain": samples, "family": family, "mixing_depth": 3, "seed": 0
    })
}

fn train(epochs: usize) -> Value {
    json!({
        "epochs": epochs, "batch_size": 128, "learning_rate": 0.001,
        "seed": 0, "preset": "synthetic", "eval_every": 2
    })
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_replication_counts_and_rerun_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", &json!({ "scm": scm(1000, "paper_cubic") }));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let report = stdout_json(&lcslab(&["generate", "--config", s(&cfg), "--out", s(&a)]));
    assert_eq!(report["rows"], 5000);
    assert_eq!(report["domain_counts"], json!([1000, 1000, 1000, 1000, 1000]));
    stdout_json(&lcslab(&["generate", "--config", s(&cfg), "--out", s(&b)]));
    for f in ["dataset.csv", "latents.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(a.join("dataset.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5001);
}

#[test]
fn seed_flag_changes_output() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", &json!({ "scm": scm(50, "paper_cubic") }));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    stdout_json(&lcslab(&["generate", "--config", s(&cfg), "--out", s(&a)]));
    stdout_json(&lcslab(&["generate", "--config", s(&cfg), "--seed", "9", "--out", s(&b)]));
    assert_ne!(fs::read(a.join("dataset.csv")).unwrap(), fs::read(b.join("dataset.csv")).unwrap());
}

#[test]
fn missing_field_exits_2_naming_it() {
    let dir = TempDir::new().unwrap();
    let mut c = scm(10, "paper_cubic");
    c.as_object_mut().unwrap().remove("mixing_depth");
    let cfg = write_config(dir.path(), "c.json", &json!({ "scm": c }));
    let out = lcslab(&["generate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mixing_depth"));
}

#[test]
fn unknown_key_exits_2() {
    let dir = TempDir::new().unwrap();
    let mut c = scm(10, "paper_cubic");
    c["colour"] = json!("red");
    let cfg = write_config(dir.path(), "c.json", &json!({ "scm": c }));
    let out = lcslab(&["generate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));

    let cfg = write_config(dir.path(), "d.json", &json!({ "scm": scm(10, "paper_cubic"), "extra": 1 }));
    let out = lcslab(&["generate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn out_of_range_value_exits_2() {
    let dir = TempDir::new().unwrap();
    let mut t = train(2);
    t["batch_size"] = json!(0);
    let cfg = write_config(dir.path(), "c.json", &json!({ "scm": scm(10, "paper_cubic"), "train": t }));
    let out = lcslab(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.batch_size"));
}

#[test]
fn missing_config_file_exits_4() {
    let out = lcslab(&["generate", "--config", "/nonexistent/c.json", "--out", "/tmp"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn diverging_training_exits_3() {
    let dir = TempDir::new().unwrap();
    let mut t = train(3);
    t["learning_rate"] = json!(1e150);
    let cfg = write_config(dir.path(), "c.json", &json!({ "scm": scm(100, "paper_cubic"), "train": t }));
    let out = lcslab(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn gradcheck_reports_every_op_below_tolerance() {
    let dir = TempDir::new().unwrap();
    let r = stdout_json(&lcslab(&["gradcheck", "--out", s(dir.path())]));
    assert_eq!(r["pass"], true);
    let ops = r["ops"].as_object().unwrap();
    assert_eq!(ops.len(), 17);
    for (name, v) in ops.iter().chain(r["losses"].as_object().unwrap()) {
        assert!(v.as_f64().unwrap() < 1e-4, "{name}: {v}");
    }
    assert!(dir.path().join("gradcheck.json").exists());
}

#[test]
fn counterexample_observations_match() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", &json!({ "scm": scm(400, "post_nonlinear") }));
    let r = stdout_json(&lcslab(&["counterexample", "--config", s(&cfg)]));
    assert!(r["max_abs_diff"].as_f64().unwrap() <= 1e-9);
    assert_eq!(r["samples"], 2000);
}

#[test]
fn counterexample_rejects_cubic_family() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", &json!({ "scm": scm(10, "paper_cubic") }));
    let out = lcslab(&["counterexample", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_resume_and_evaluate() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let full = write_config(d, "full.json", &json!({ "scm": scm(100, "paper_cubic"), "train": train(6) }));
    let half = write_config(d, "half.json", &json!({ "scm": scm(100, "paper_cubic"), "train": train(3) }));

    let r = stdout_json(&lcslab(&["train", "--config", s(&full), "--out", s(&d.join("a")), "--erm"]));
    assert_eq!(r["epochs"], 6);
    assert!(r["erm_target_metric"]["r2"].is_number());
    stdout_json(&lcslab(&["train", "--config", s(&full), "--out", s(&d.join("b"))]));
    stdout_json(&lcslab(&["train", "--config", s(&half), "--out", s(&d.join("h"))]));
    let state = d.join("h/train_state.json");
    stdout_json(&lcslab(&["train", "--config", s(&full), "--resume", s(&state), "--out", s(&d.join("r"))]));
    for f in ["checkpoint.json", "history.jsonl", "train_state.json"] {
        let a = fs::read(d.join("a").join(f)).unwrap();
        assert_eq!(a, fs::read(d.join("b").join(f)).unwrap(), "rerun {f}");
        assert_eq!(a, fs::read(d.join("r").join(f)).unwrap(), "resume {f}");
    }
    let history = fs::read_to_string(d.join("a/history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 3);

    let ck = d.join("a/checkpoint.json");
    let m = stdout_json(&lcslab(&["evaluate", "--config", s(&full), "--checkpoint", s(&ck), "--out", s(&d.join("e"))]));
    let mcc = m["mcc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mcc));
    assert!(m["target_r2"].is_number());
    let saved: Value = serde_json::from_slice(&fs::read(d.join("e/metrics.json")).unwrap()).unwrap();
    assert_eq!(saved, m);
}

#[test]
fn resume_with_changed_settings_is_rejected() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let half = write_config(d, "half.json", &json!({ "scm": scm(50, "paper_cubic"), "train": train(2) }));
    let mut t = train(4);
    t["learning_rate"] = json!(0.01);
    let other = write_config(d, "other.json", &json!({ "scm": scm(50, "paper_cubic"), "train": t }));
    stdout_json(&lcslab(&["train", "--config", s(&half), "--out", s(&d.join("h"))]));
    let state = d.join("h/train_state.json");
    let out = lcslab(&["train", "--config", s(&other), "--resume", s(&state), "--out", s(&d.join("r"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn resample_writes_marginals_and_subset() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cfg = write_config(
        d,
        "c.json",
        &json!({
            "scm": scm(1000, "paper_cubic"),
            "resample": { "num_classes": 7, "target_kl": 0.3, "seed": 1 }
        }),
    );
    let (a, b) = (d.join("a"), d.join("b"));
    let r = stdout_json(&lcslab(&["resample", "--config", s(&cfg), "--out", s(&a)]));
    assert!(r["max_residual"].as_f64().unwrap() <= 0.05);
    for kl in r["achieved_kl"].as_array().unwrap() {
        assert!(kl.as_f64().unwrap() < 0.05);
    }
    stdout_json(&lcslab(&["resample", "--config", s(&cfg), "--out", s(&b)]));
    for f in ["resampled.csv", "marginals.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn csv_data_section_round_trips_generated_data() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let gen = write_config(d, "g.json", &json!({ "scm": scm(100, "paper_cubic") }));
    stdout_json(&lcslab(&["generate", "--config", s(&gen), "--out", s(&d.join("data"))]));
    // Paths inside the config resolve against its own directory.
    let cfg = write_config(
        d,
        "c.json",
        &json!({
            "data": {
                "csv": "data/dataset.csv", "latents": "data/latents.csv",
                "task": { "kind": "regression" }, "target_domain": 4, "d_c": 1, "d_s": 1
            },
            "train": train(2)
        }),
    );
    let from_csv = stdout_json(&lcslab(&["train", "--config", s(&cfg), "--out", s(&d.join("x"))]));
    let both = write_config(d, "s.json", &json!({ "scm": scm(100, "paper_cubic"), "train": train(2) }));
    let from_scm = stdout_json(&lcslab(&["train", "--config", s(&both), "--out", s(&d.join("y"))]));
    assert_eq!(from_csv["last"], from_scm["last"]);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = lcslab(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}
