use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "seed": 3,
  "dataset": {"kind": "multiclass_gaussian", "num_classes": 3, "dim": 4,
              "samples_per_class": 60, "separation": 3.0, "noise_std": 1.0},
  "partition": {"scheme": "noniid_shards", "num_clients": 10},
  "learning_rate": 0.2,
  "local_epochs": 2,
  "client_fraction": 0.3,
  "max_rounds": 8,
  "targets": [0.6, 0.9],
  "device_fractions": [0.5, 1.0],
  "sweep": {"criteria": ["DS", "LD", "MW"]}
}"#;

fn fedprio(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedprio"))
        .args(args)
        .env_remove("FEDPRIO_OUT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn csvs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            out.extend(csvs(&p));
        } else {
            out.push((p.display().to_string(), fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn sweep_writes_nine_runs_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = fedprio(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let runs = fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(runs, 9);
    for name in ["config.json", "manifest.json", "trace.csv", "device_accuracy.csv", "target_table.csv", "gain_table.csv", "comparison.csv"] {
        assert!(a.join("LD-MW-DS").join(name).is_file(), "missing {name}");
    }
    let strip = |v: Vec<(String, Vec<u8>)>, root: &Path| {
        v.into_iter()
            .map(|(p, bytes)| (p.replacen(&root.display().to_string(), "", 1), bytes))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(csvs(&a), &a), strip(csvs(&b), &b));
    let trace = fs::read_to_string(a.join("trace.csv")).unwrap();
    assert!(trace.starts_with("round,experiment_id,global_accuracy\n1,DS,"));
    assert_eq!(trace.lines().count(), 1 + 8 * 9);
}

#[test]
fn run_honours_max_rounds_override_and_env_out_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("env-out");
    let o = Command::new(env!("CARGO_BIN_EXE_fedprio"))
        .args(["run", "--config", &cfg, "--max-rounds", "3"])
        .env("FEDPRIO_OUT_DIR", &out)
        .env("RUST_LOG", "info")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4);
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert_eq!(stderr.lines().filter(|l| l.contains("round=") && l.contains("global_accuracy=")).count(), 3);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["start_params_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn validation_failures_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad_fraction = SMALL.replace("\"client_fraction\": 0.3", "\"client_fraction\": 1.5");
    let cfg = write_config(tmp.path(), &bad_fraction);
    let o = fedprio(&["run", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("client_fraction"));

    let cb_on_multiclass = SMALL.replace("\"criteria\": [\"DS\", \"LD\", \"MW\"]", "\"criteria\": [\"DS\", \"CB\"]");
    let cfg = write_config(tmp.path(), &cb_on_multiclass);
    let o = fedprio(&["sweep", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let cfg = write_config(tmp.path(), "{\"seed\": 1, \"dataset\": {\"kind\": \"jsonl\", \"path\": \"d.jsonl\"}, \"bogus\": 2}");
    assert_eq!(fedprio(&["run", "--config", &cfg]).status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"seed": 1, "dataset": {"kind": "jsonl", "path": "missing.jsonl"}}"#);
    let o = fedprio(&["run", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn lr_search_reports_choice_or_not_found() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let o = fedprio(&["lr-search", "--config", &cfg, "--grid", "0.05,0.2,0.5", "--target", "0.6"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("chosen learning_rate="));

    let o = fedprio(&["lr-search", "--config", &cfg, "--grid", "0.0001", "--target", "1.0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stdout).contains("NOT-FOUND"));

    let o = fedprio(&["lr-search", "--config", &cfg, "--grid", "-0.1"]);
    assert_eq!(o.status.code(), Some(1));
}
