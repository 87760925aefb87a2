use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fishmerge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fishmerge")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = fishmerge(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

/// Suite on disk plus a pre-trained and a fine-tuned checkpoint with Fishers.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        ok(d, &["suite", "--seed", "3", "--out", "s"]);
        std::fs::write(d.join("short.json"), r#"{"epochs": 8}"#).unwrap();
        ok(
            d,
            &[
                "train",
                "--init",
                "s/init.fmrg",
                "--data",
                "s/blobs-base-train.csv",
                "--config",
                "short.json",
                "--out",
                "pre.fmrg",
            ],
        );
        ok(
            d,
            &[
                "train",
                "--init",
                "pre.fmrg",
                "--data",
                "s/blobs-rot40-train.csv",
                "--config",
                "short.json",
                "--out",
                "ft.fmrg",
            ],
        );
        ok(d, &["fisher", "--ckpt", "pre.fmrg", "--data", "s/blobs-base-train.csv", "--n", "256", "--out", "pre.fish"]);
        ok(d, &["fisher", "--ckpt", "ft.fmrg", "--data", "s/blobs-rot40-train.csv", "--n", "256", "--out", "ft.fish"]);
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

#[test]
fn workflow() {
    let fx = Fixture::new();
    let d = fx.dir.path();

    // single input with lambda 1 reproduces the checkpoint byte for byte
    let report = ok(d, &["merge", "--inputs", "ft.fmrg:ft.fish:1", "--out", "same.fmrg"]);
    assert_eq!(report["n_fallback_entries"], 0);
    assert_eq!(std::fs::read(fx.path("same.fmrg")).unwrap(), std::fs::read(fx.path("ft.fmrg")).unwrap());
    ok(d, &["merge", "--inputs", "ft.fmrg::1", "--out", "same-iso.fmrg"]);
    assert_eq!(std::fs::read(fx.path("same-iso.fmrg")).unwrap(), std::fs::read(fx.path("ft.fmrg")).unwrap());

    let report = ok(
        d,
        &["merge", "--inputs", "pre.fmrg:pre.fish:0.3", "ft.fmrg:ft.fish:0.7", "--target", "1", "--out", "m.fmrg"],
    );
    assert_eq!(report["mode"], "fisher");
    assert_eq!(report["config"]["target"], 1);
    let sidecar: Value = serde_json::from_str(&std::fs::read_to_string(fx.path("m.fmrg.json")).unwrap()).unwrap();
    assert_eq!(sidecar["command"], "merge");
    assert!(sidecar["model_spec"].is_object());

    ok(
        d,
        &[
            "sweep",
            "--inputs",
            "pre.fmrg:pre.fish",
            "ft.fmrg:ft.fish",
            "--target",
            "1",
            "--grid",
            "50",
            "--val",
            "s/blobs-rot40-val.csv",
            "--out",
            "r.json",
            "--csv",
            "r.csv",
        ],
    );
    let result: Value = serde_json::from_str(&std::fs::read_to_string(fx.path("r.json")).unwrap()).unwrap();
    assert_eq!(result["points"].as_array().unwrap().len(), 50);
    assert_eq!(std::fs::read_to_string(fx.path("r.csv")).unwrap().lines().count(), 51);

    ok(
        d,
        &[
            "curve",
            "--pre",
            "pre.fmrg",
            "--ft",
            "ft.fmrg",
            "--pre-fisher",
            "pre.fish",
            "--ft-fisher",
            "ft.fish",
            "--step",
            "0.1",
            "--iid",
            "s/blobs-base-test.csv",
            "--ood",
            "s/blobs-rot40-test.csv",
            "--out",
            "c.csv",
        ],
    );
    let csv = std::fs::read_to_string(fx.path("c.csv")).unwrap();
    assert_eq!(csv.lines().count() - 1, 11);
    assert!(csv.lines().next().unwrap().contains("fisher.ood_acc"));

    let rep = ok(
        d,
        &[
            "ensemble",
            "--ckpts",
            "pre.fmrg",
            "ft.fmrg",
            "--fishers",
            "pre.fish",
            "ft.fish",
            "--test",
            "s/blobs-rot20-test.csv",
            "--out",
            "e.json",
        ],
    );
    assert_eq!(rep["inference_cost_ratio"], serde_json::json!([2, 1]));

    let rep = ok(
        d,
        &[
            "ablate-fisher-n",
            "--target",
            "ft.fmrg",
            "--donor",
            "pre.fmrg",
            "--target-data",
            "s/blobs-rot40-train.csv",
            "--donor-data",
            "s/blobs-base-train.csv",
            "--val",
            "s/blobs-rot40-val.csv",
            "--n-list",
            "32,128",
            "--grid",
            "5",
            "--out",
            "a.json",
        ],
    );
    assert_eq!(rep["rows"].as_array().unwrap().len(), 2);
    assert_eq!(rep["rows"][0]["target_fisher_examples"], 32);
}

#[test]
fn cost_matches_the_formula() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok(
        dir.path(),
        &[
            "cost",
            "--params",
            "1000",
            "--train-tokens",
            "10",
            "--fisher-examples",
            "4",
            "--tokens-per-example",
            "5",
            "--eval-tokens",
            "7",
            "--models",
            "3",
        ],
    );
    assert_eq!(v["estimate"]["train_flops"], 60000.0);
    assert_eq!(v["estimate"]["fisher_flops"], 120000.0);
    assert_eq!(v["estimate"]["merge_flops"], 9000.0);
    assert_eq!(v["estimate"]["eval_flops"], 14000.0);
}

fn error_of(out: &Output) -> Value {
    serde_json::from_slice::<Value>(&out.stderr).unwrap()["error"].clone()
}

#[test]
fn exit_codes_and_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = fishmerge(d, &["merge", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_of(&out)["kind"], "usage");

    let out = fishmerge(d, &["merge", "--inputs", "missing.fmrg::1", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_of(&out)["message"].as_str().unwrap().contains("missing.fmrg"));

    std::fs::write(d.join("junk.fmrg"), b"FMRG\x01\x00\x00\x00garbage").unwrap();
    let out = fishmerge(d, &["merge", "--inputs", "junk.fmrg::1", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));

    ok(d, &["suite", "--seed", "0", "--out", "s"]);
    let linear = r#"{"input_dim": 2, "hidden_layers": [{"width": 4, "activation": "identity"}], "num_classes": 3}"#;
    std::fs::write(d.join("linear.json"), linear).unwrap();
    std::fs::write(d.join("bad.json"), r#"{"learning_rate": 1e200, "optimizer": "sgd", "epochs": 3}"#).unwrap();
    let out = fishmerge(
        d,
        &[
            "train",
            "--spec",
            "linear.json",
            "--data",
            "s/blobs-base-train.csv",
            "--config",
            "bad.json",
            "--out",
            "x.fmrg",
        ],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_of(&out)["kind"], "numerical");

    let out = Command::new(env!("CARGO_BIN_EXE_fishmerge"))
        .current_dir(d)
        .env("FISHMERGE_THREADS", "zero")
        .args(["suite", "--out", "t"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["suite", "--seed", "2", "--out", "s"]);
    for threads in ["1", "4"] {
        let out = Command::new(env!("CARGO_BIN_EXE_fishmerge"))
            .current_dir(d)
            .env("FISHMERGE_THREADS", threads)
            .args([
                "fisher",
                "--ckpt",
                "s/init.fmrg",
                "--data",
                "s/blobs-base-train.csv",
                "--out",
                &format!("f{threads}.fish"),
            ])
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    assert_eq!(std::fs::read(d.join("f1.fish")).unwrap(), std::fs::read(d.join("f4.fish")).unwrap());
}
