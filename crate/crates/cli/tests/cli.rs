use std::path::Path;
use std::process::{Command, Output};

fn eps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eps")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let cfg = r#"{
        "seed": 3,
        "dataset": {"synthetic": {"samples_per_mode": 6, "feature_dim": 2, "seed": 3}},
        "encoder": {"variant": "free_table", "dim": 2, "hidden": [], "init": "features", "init_scale": 0.1},
        "train": {"learning_rate": 0.01, "epochs": 4, "learn_beta": false, "eval_ks": [1, 2],
                  "loss": {"variant": "margin", "alpha": 0.2, "beta_init": 0.201},
                  "miner": {"samples_per_class": 6}}
    }"#;
    let path = dir.join("exp.json");
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn verify_exit_codes() {
    let o = eps(&["verify", "--claim", "claim1", "--sweep-n", "4:24"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["details"]["crossover_n"], 12);
    assert_eq!(report["passed"], true);

    let o = eps(&["verify", "--claim", "thm7"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown claim"));

    // Three descent steps cannot collapse the classes.
    let o = eps(&["verify", "--claim", "thm1", "--steps", "3", "--restarts", "1"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("FAIL max_within_d"));

    let o = eps(&["verify", "--claim", "claim3", "--n", "30"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_writes_report_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r/claim4.json");
    let o = eps(&["verify", "--claim", "claim4", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(&out).unwrap(), o.stdout);
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"train": {"loss": {"alpha": "wide"}}}"#).unwrap();
    let o = eps(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.loss.alpha"));

    std::fs::write(&path, r#"{"train": {"miner": {"k": 4}}}"#).unwrap();
    let o = eps(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.miner"));

    std::fs::write(&path, r#"{"dataset": {"csv": {"path": "missing.csv"}}}"#).unwrap();
    let o = eps(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));

    let o = eps(&["train", "--config", path.to_str().unwrap(), "--sweep", "batch_size", "1,2"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = eps(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        "config.json",
        "experiment.json",
        "report.json",
        "metrics.csv",
        "summary.csv",
        "scatter_train.svg",
        "params.bin",
    ] {
        let x = std::fs::read(a.join(f)).unwrap_or_else(|_| panic!("{f} missing"));
        if f == "experiment.json" {
            continue; // records its own output directory
        }
        assert_eq!(x, std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let resolved: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["seed"], 3);
    assert_eq!(resolved["train"]["adam_beta2"], 0.999);

    let o = eps(&["eval", "--config", cfg.to_str().unwrap(), "--params", a.join("params.bin").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ev: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(ev["train"], report["training"]["evals"][0]["train"]);
}

#[test]
fn sweeps_write_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("sweep");
    let o = eps(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--sweep",
        "positive_k",
        "2,4,6",
        "--set",
        "train.epochs=2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("4,train,"));
    let c: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("positive_k=6/config.json")).unwrap()).unwrap();
    assert_eq!(c["train"]["miner"]["samples_per_class"], 6);
    assert_eq!(c["train"]["epochs"], 2);
}

#[test]
fn gen_data_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d/points.csv");
    let svg = dir.path().join("d/points.svg");
    let o = eps(&[
        "gen-data",
        "--set",
        "feature_dim=2",
        "--set",
        "samples_per_mode=5",
        "--seed",
        "9",
        "--out",
        csv.to_str().unwrap(),
        "--svg",
        svg.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("feature_0,feature_1,class,mode\n"));
    assert_eq!(text.lines().count(), 31);

    let again = dir.path().join("again.svg");
    let o = eps(&["plot", "--csv", csv.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(&again).unwrap(), std::fs::read(&svg).unwrap());

    let o = eps(&["plot", "--out", again.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = eps(&["gen-data", "--set", "feature_dims=2", "--out", csv.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}
