//! End-to-end behavior of the `lab` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lab")).args(args).env("LAB_LOG", "error").output().unwrap()
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn run(exp: &str, cfg: &Path, out: &Path, jobs: Option<&str>) -> Output {
    let mut args = vec![exp, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    if let Some(j) = jobs {
        args.extend(["--jobs", j]);
    }
    lab(&args)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn error_record(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().rev().find(|l| l.starts_with('{')).expect("JSON error record on stderr");
    serde_json::from_str(line).unwrap()
}

fn separable_train_config() -> Value {
    json!({
        "seed": 0,
        "dataset": {"source": "benchmark", "name": "separable_linear"},
        "loss": {"kind": "exponential"},
        "hyper": {"epochs": 40},
    })
}

#[test]
fn gen_writes_dataset_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "gen.json",
        &json!({"seed": 5, "dataset": {"source": "benchmark", "name": "imbalanced", "ratio": 4.0}}),
    );
    let out = tmp.path().join("gen");
    let res = run("gen", &cfg, &out, None);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["experiment"], "gen");
    assert_eq!(manifest["master_seed"], 5);
    let names: Vec<&str> = manifest["artifacts"].as_array().unwrap().iter().map(|a| a["path"].as_str().unwrap()).collect();
    assert!(names.contains(&"dataset.csv") && names.contains(&"dataset_meta.json"));
    let rows = std::fs::read_to_string(out.join("dataset.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 100 + 25);
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let res = lab(&["nonsense", "--config", "x.json"]);
    assert_eq!(res.status.code(), Some(2));
    let res = lab(&["gen"]);
    assert_eq!(res.status.code(), Some(2));
    let missing = tmp.path().join("missing.json");
    let res = lab(&["gen", "--config", missing.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(error_record(&res)["exit_code"], 2);
    let cfg = write_config(tmp.path(), "bad.json", &json!({"seed": 1, "datset": {}}));
    let res = run("gen", &cfg, &tmp.path().join("o"), None);
    assert_eq!(res.status.code(), Some(2));
    let cfg = write_config(tmp.path(), "ok.json", &separable_train_config());
    let res = run("train", &cfg, &tmp.path().join("o"), Some("0"));
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_rejected_before_running() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "csv.json",
        &json!({"seed": 1, "dataset": {"source": "csv", "path": "does_not_exist.csv"}, "hyper": {"epochs": 5}}),
    );
    let out = tmp.path().join("out");
    let res = run("train", &cfg, &out, None);
    assert_eq!(res.status.code(), Some(2));
    assert!(error_record(&res)["message"].as_str().unwrap().contains("does_not_exist.csv"));
    assert_eq!(std::fs::read_dir(&out).map(|d| d.count()).unwrap_or(0), 0);
}

#[test]
fn runtime_failure_leaves_no_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.csv"), "f0,label,noise_flag,class\n0.5,1,0,1\nnot_a_number,-1,0,0\n").unwrap();
    let cfg = write_config(
        tmp.path(),
        "csv.json",
        &json!({"seed": 1, "dataset": {"source": "csv", "path": "bad.csv"}, "hyper": {"epochs": 5}}),
    );
    let out = tmp.path().join("out");
    let res = run("train", &cfg, &out, None);
    assert_eq!(res.status.code(), Some(1), "{}", String::from_utf8_lossy(&res.stderr));
    let rec = error_record(&res);
    assert_eq!(rec["exit_code"], 1);
    assert!(!rec["message"].as_str().unwrap().is_empty());
    assert_eq!(std::fs::read_dir(&out).map(|d| d.count()).unwrap_or(0), 0);
}

#[test]
fn trace_has_one_row_per_epoch_plus_initial() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "train.json", &separable_train_config());
    let out = tmp.path().join("train");
    let res = run("train", &cfg, &out, None);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let mut reader = csv::Reader::from_path(out.join("trace.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 41);
    assert_eq!(&rows[0][0], "0");
    let summary = read_json(&out.join("train_summary.json"));
    assert!(summary["final_cosine"].as_f64().unwrap() > 0.0);
}

#[test]
fn report_without_inputs_says_so() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "report.json", &json!({"seed": 0}));
    let out = tmp.path().join("report");
    let res = run("report", &cfg, &out, None);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(read_json(&out.join("summary.json"))["no_inputs"], true);
}

#[test]
fn report_collects_training_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut train = separable_train_config();
    train["scheme"] = json!({"kind": "error_hard_first"});
    train["estimator"] = json!({"repeats": 3});
    let cfg = write_config(tmp.path(), "train.json", &train);
    let train_out = tmp.path().join("train");
    assert_eq!(run("train", &cfg, &train_out, None).status.code(), Some(0));
    let cfg = write_config(tmp.path(), "report.json", &json!({"seed": 0, "inputs": ["train"]}));
    let out = tmp.path().join("report");
    let res = run("report", &cfg, &out, None);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["no_inputs"], false);
    assert!(out.join("error_histogram.csv").is_file());
    assert!(out.join("margin_error_scatter.csv").is_file());
    let curves: Vec<PathBuf> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("curve_"))
        .collect();
    assert_eq!(curves.len(), 1);
    let rows = std::fs::read_to_string(&curves[0]).unwrap().lines().count();
    assert_eq!(rows, 1 + 41);
}

#[test]
fn report_rejects_other_schema_versions() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "train.json", &separable_train_config());
    let train_out = tmp.path().join("train");
    assert_eq!(run("train", &cfg, &train_out, None).status.code(), Some(0));
    let manifest_path = train_out.join("manifest.json");
    let mut manifest = read_json(&manifest_path);
    manifest["schema_version"] = json!(99);
    std::fs::write(&manifest_path, manifest.to_string()).unwrap();
    let cfg = write_config(tmp.path(), "report.json", &json!({"seed": 0, "inputs": ["train"]}));
    let out = tmp.path().join("report");
    let res = run("report", &cfg, &out, None);
    assert_eq!(res.status.code(), Some(1));
    let msg = error_record(&res)["message"].as_str().unwrap().to_string();
    assert!(msg.contains("train") && msg.contains("99"), "{msg}");
    assert!(!out.join("summary.json").exists());
}

#[test]
fn reruns_reproduce_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "diff.json",
        &json!({
            "seed": 9,
            "dataset": {"source": "benchmark", "name": "imbalanced"},
            "hyper": {"epochs": 30},
            "estimator": {"repeats": 4, "folds": 4},
        }),
    );
    let hashes = |dir: &Path| -> Vec<String> {
        read_json(&dir.join("manifest.json"))["artifacts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|a| a["sha256"].as_str().unwrap().to_string())
            .collect()
    };
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(run("difficulty", &cfg, &a, Some("1")).status.code(), Some(0));
    assert_eq!(run("difficulty", &cfg, &b, Some("4")).status.code(), Some(0));
    assert_eq!(hashes(&a), hashes(&b));
    assert_eq!(std::fs::read(a.join("profile.csv")).unwrap(), std::fs::read(b.join("profile.csv")).unwrap());
}
