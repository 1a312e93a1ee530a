use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use egan_cli::{load_generator, read_csv, Dataset, Metric};
use egan_core::{generator_output_cov, random_psd};
use serde_json::Value;

fn egan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egan")).args(args).output().expect("binary runs")
}

fn write_spec(dir: &Path, name: &str, json: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, json).unwrap();
    path.to_string_lossy().into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_writes_reloadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data.csv");
    let o = egan(&["gen-data", "--d", "2", "--n", "3", "--seed", "1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ds = Dataset::load(&out).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.cov, random_psd(2, 1).unwrap());
    assert_eq!(ds, Dataset::generate(2, 3, 1).unwrap());
}

#[test]
fn gen_data_covariance_matches_target() {
    let ds = Dataset::generate(32, 10_000, 5).unwrap();
    let emp = ds.measure().unwrap().covariance();
    let diff = (emp.as_matrix() - ds.cov.as_matrix()).norm();
    // Entrywise standard error is about sqrt(2/n) times the scale of K.
    assert!(diff < 0.05 * ds.cov.frobenius_norm() + 0.02, "{diff}");
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "s.json", r#"{"kind": "train", "seed": 1, "bogus": 3}"#);
    let o = egan(&["train", "--config", &spec]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_seed_exits_2() {
    assert_eq!(egan(&["train"]).status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        "s.json",
        r#"{"kind": "train", "seed": 1, "d": 2, "r": 1, "target": {"type": "dataset", "path": "/nonexistent/data.csv"}}"#,
    );
    let o = egan(&["train", "--config", &spec, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/data.csv"));
}

#[test]
fn population_reports_both_solutions() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        "p.json",
        r#"{"kind": "population", "seed": 1, "d": 3, "r": 2, "lambda": 2.0,
            "target": {"type": "diagonal", "values": [3.0, 2.0, 0.5]}}"#,
    );
    let out = dir.path().join("pop");
    let o = egan(&["population", "--config", &spec, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out.join("population.json"));
    let eig = |key: &str| -> Vec<f64> {
        report[key].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect()
    };
    let soft = eig("softthresh_eigenvalues");
    let rpca = eig("rpca_eigenvalues");
    for (got, want) in soft.iter().zip([2.0, 1.0, 0.0]) {
        assert!((got - want).abs() < 1e-12);
    }
    for (got, want) in rpca.iter().zip([3.0, 2.0, 0.0]) {
        assert!((got - want).abs() < 1e-12);
    }
    assert!(soft.iter().zip(&rpca).all(|(s, r)| s <= &(r + 1e-12)));
    read_csv(&out.join("metrics.csv")).unwrap();
}

#[test]
fn population_at_zero_lambda_solutions_coincide() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pop");
    let o = egan(&["population", "--seed", "4", "--d", "4", "--r", "2", "--lambda", "0", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out.join("population.json"));
    assert_eq!(report["softthresh_cov"], report["rpca_cov"]);
    assert!(report["population_value"].is_null());
}

#[test]
fn population_value_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..3u64 {
        let out = dir.path().join(format!("pop{seed}"));
        let spec = write_spec(
            dir.path(),
            &format!("p{seed}.json"),
            &format!(r#"{{"kind": "population", "seed": {seed}, "d": 3, "r": 3, "lambda": 0.5, "target": {{"type": "shifted_random_psd"}}}}"#),
        );
        let o = egan(&["population", "--config", &spec, "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        let report = read_json(&out.join("population.json"));
        assert!(report["waterfilling_residual"].as_f64().unwrap() <= 1e-8);
    }
}

#[test]
fn single_iteration_run_has_one_metric_block() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    let o = egan(&[
        "train", "--seed", "3", "--d", "3", "--r", "2", "--n", "50", "--batch", "20", "--iters", "1", "--loss", "entropic",
        "--lambda", "1", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&out.join("metrics.csv")).unwrap();
    let metrics: Vec<Metric> = rows.iter().map(|r| r.metric).collect();
    assert_eq!(metrics, vec![Metric::DistToRpca, Metric::DistToTrueCov, Metric::DistToSoftthresh, Metric::Loss]);
    assert!(rows.iter().all(|r| r.iteration_or_n == 0 && r.seed == 3));
}

#[test]
fn saved_generator_reproduces_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    let o = egan(&[
        "train", "--seed", "8", "--d", "3", "--r", "2", "--n", "200", "--batch", "20", "--iters", "30", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let g = load_generator(&out.join("generator.csv")).unwrap();
    let summary = read_json(&out.join("summary.json"));
    let trace = summary["runs"][0]["generator_trace"].as_f64().unwrap();
    assert_eq!(generator_output_cov(&g).trace(), trace);
}

#[test]
fn aborted_training_exits_3_and_keeps_partial_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        "a.json",
        r#"{"kind": "train", "seed": 2, "d": 2, "r": 1, "n": 100, "batch_size": 10, "iterations": 50,
            "lambda": 0.5, "loss": "entropic", "tol": 1e-300, "max_iter": 1, "log_every": 1}"#,
    );
    let out = dir.path().join("a");
    let o = egan(&["train", "--config", &spec, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read_csv(&out.join("metrics.csv")).is_ok());
    assert!(out.join("generator.csv").exists());
    assert!(read_json(&out.join("summary.json"))["runs"][0]["aborted"].is_string());
}

#[test]
fn thm1_verify_rejects_sinkhorn_loss() {
    let o = egan(&["thm1-verify", "--seed", "1", "--loss", "sinkhorn"]);
    assert_eq!(o.status.code(), Some(2));
}

fn small_sweep(dir: &Path, name: &str, threads: &str) -> (String, Value) {
    let spec = write_spec(
        dir,
        &format!("{name}.json"),
        r#"{"kind": "gen-sweep", "seed": 6, "d": 2, "r": 2, "batch_size": 10, "iterations": 20,
            "sweep": {"n": [20, 40, 80, 160], "repetitions": 3, "holdout": 30}}"#,
    );
    let out = dir.join(name);
    let o = egan(&["gen-sweep", "--config", &spec, "--out", out.to_str().unwrap(), "--threads", threads]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    (fs::read_to_string(out.join("metrics.csv")).unwrap(), read_json(&out.join("summary.json")))
}

#[test]
fn sweep_is_deterministic_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, summary) = small_sweep(dir.path(), "one", "1");
    let (b, _) = small_sweep(dir.path(), "three", "3");
    assert_eq!(a, b);
    assert!(summary.get("slope").is_some());
    let rows = read_csv(&dir.path().join("one").join("metrics.csv")).unwrap();
    assert!(rows.iter().any(|r| r.experiment == "gen-sweep-holdout"));
    assert_eq!(rows.iter().filter(|r| r.experiment == "gen-sweep-mean").count(), 4);
}
