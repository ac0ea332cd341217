use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn msjq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msjq"))
        .args(args)
        .env_remove("MSJQ_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stderr_error(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let v: Value = serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"));
    v["error"].clone()
}

fn cfg(name: &str) -> String {
    configs().join(name).display().to_string()
}

#[test]
fn missing_config_is_an_io_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.toml");
    let out = msjq(&["simulate", "--config", missing.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = stderr_error(&out);
    assert_eq!(err["kind"], "IoError");
    assert!(err["message"].as_str().unwrap().contains("absent.toml"));
}

#[test]
fn unknown_key_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[cluster]\nnum_servers = 4\nservers = 2\nclasses = []\n").unwrap();
    let out = msjq(&["bound", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_error(&out)["kind"], "ConfigParseError");
}

#[test]
fn invalid_cluster_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wide.toml");
    fs::write(
        &path,
        "[cluster]\nnum_servers = 2\n[[cluster.classes]]\nclass_id = 1\nserver_need = 3\nservice_rate = 1.0\narrival_rate = 0.1\n",
    )
    .unwrap();
    let out = msjq(&["bound", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert_eq!(stderr_error(&out)["kind"], "ValidationError");
}

#[test]
fn bad_flags_are_usage_errors() {
    let out = msjq(&["reproduce", "set-iv"]);
    assert!(!out.status.success());
    assert_eq!(stderr_error(&out)["kind"], "UsageError");
    let out = msjq(&["simulate"]);
    assert_eq!(stderr_error(&out)["kind"], "UsageError");
}

#[test]
fn bound_on_largest_set_i_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = msjq(&[
        "bound",
        "--config",
        &cfg("set-i-n65536.toml"),
        "--format",
        "json",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let p = &v[0];
    assert_eq!(p["n"], 65536);
    assert_eq!(format!("{:.4}", p["rho"].as_f64().unwrap()), "0.9175");
    assert_eq!(format!("{:.5}", p["threshold"].as_f64().unwrap()), "0.99609");
    assert_eq!(p["bound_clamped"].as_f64(), Some(1.0));
    assert!(dir.path().join("bound.json").exists());
}

#[test]
fn simulate_reports_and_honours_seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let run = |extra: &[&str]| {
        let mut args = vec!["simulate", "--config", "", "--format", "json", "--arrivals", "20000", "--out", d];
        let c = cfg("fixture-n3.toml");
        args[2] = &c;
        args.extend_from_slice(extra);
        let out = msjq(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        serde_json::from_slice::<Value>(&out.stdout).unwrap()
    };
    let from_config = run(&[]);
    assert_eq!(from_config["seed"], 1);
    let overridden = run(&["--seed", "9", "--trace"]);
    assert_eq!(overridden["seed"], 9);
    assert_eq!(overridden["classes"].as_array().unwrap().len(), 2);
    assert!(from_config["p_queue_overall"]["mean"].as_f64().unwrap() > 0.0);
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.lines().count() > 20000);
}

#[test]
fn exact_writes_stationary_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let out = msjq(&[
        "exact",
        "--config",
        &cfg("fixture-n3.toml"),
        "--format",
        "json",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let pq = v["p_queue"]["overall"].as_f64().unwrap();
    assert!((pq - 0.41763249772691).abs() < 1e-9, "{pq}");
    assert!(v["mean_drift"].as_f64().unwrap().abs() <= 1e-6);
    let csv = fs::read_to_string(dir.path().join("stationary.csv")).unwrap();
    assert!(csv.starts_with("state,probability\n"));
}

#[test]
fn fluid_and_couple_produce_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = msjq(&["fluid", "--config", &cfg("fixture-n3.toml"), "--horizon", "2", "--dt", "0.5", "--out", d]);
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("fluid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);

    let out = msjq(&["couple", "--config", &cfg("fixture-n3.toml"), "--format", "json", "--out", d]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["identical_before_divergence"], true);
}

#[test]
fn out_dir_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_msjq"))
        .args(["bound", "--config", &cfg("single-class.toml")])
        .env("MSJQ_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = fs::read_to_string(dir.path().join("bound.csv")).unwrap();
    assert!(text.starts_with("key,value\n"));
    assert!(text.contains("\nrho,0.5\n"));
}

#[test]
fn sweep_writes_table_metadata_and_figures() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.toml");
    fs::write(
        &path,
        "[sweep]\nn_values = [16, 32]\nneeds = [1, 2]\nservice_rates = [1.0, 1.0]\n\
         [sweep.load]\nrho = 0.6\n[sweep.sim]\nseed = 3\narrivals = 5000\n",
    )
    .unwrap();
    let out = msjq(&["sweep", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",3,0")));
    let meta: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("sweep.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["spec"]["sim"]["seed"], 3);
    assert!(dir.path().join("sweep-queueing.svg").exists());
    assert!(dir.path().join("sweep-scaled-counts.svg").exists());
}

#[test]
fn reproduce_set_iii_writes_three_tables_and_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let out = msjq(&["reproduce", "set-iii", "--arrivals", "20000", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for label in ["sqrt", "quarter-root", "log2-plus-2"] {
        let csv = fs::read_to_string(dir.path().join(format!("set-iii-{label}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 13);
    }
    let svg = fs::read_to_string(dir.path().join("set-iii-class3-queueing.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}
