use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn flowforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowforge"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, contents: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, contents).unwrap();
    path.to_str().unwrap().to_owned()
}

fn sine_density() -> Value {
    json!({"schema": 1, "resolution": 65, "kind": "sine1d", "params": {"amplitude": 0.5}})
}

#[test]
fn pushforward_suite_passes_for_sine_pair() {
    let out = flowforge(&["verify", "--suite", "pushforward", "--density-pair", "sine-uniform"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let records: Value = serde_json::from_slice(&out.stdout).unwrap();
    let record = &records[0];
    assert_eq!(record["satisfied"], true);
    assert!(record["measured"].as_f64().unwrap() <= 1e-3);
}

#[test]
fn spectrum_suite_flags_half_turn_only() {
    let out = flowforge(&["verify", "--suite", "spectrum"]);
    assert_eq!(out.status.code(), Some(0));
    let records: Value = serde_json::from_slice(&out.stdout).unwrap();
    for r in records.as_array().unwrap() {
        let flagged = r["satisfied"] == false;
        assert_eq!(flagged, r["case"] == "rotation pi", "{r}");
    }
}

#[test]
fn kr_build_rejects_mismatched_dimensions() {
    let dir = TempDir::new().unwrap();
    let s = write(dir.path(), "s.json", &sine_density().to_string());
    let t = write(
        dir.path(),
        "t.json",
        &json!({"schema": 1, "resolution": 65, "kind": "uniform", "params": {"dim": 2}}).to_string(),
    );
    let map = dir.path().join("map.json");
    let out = flowforge(&["kr-build", "--source", &s, "--target", &t, "--out", map.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    assert!(!map.exists());
}

#[test]
fn unknown_flags_and_missing_files_are_argument_errors() {
    assert_eq!(flowforge(&["verify", "--suite", "l2", "--bogus"]).status.code(), Some(2));
    let out = flowforge(&["metrics", "--kind", "l2", "--p", "/nonexistent.json", "--q", "/nonexistent.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn map_round_trip_through_flow_sample() {
    let dir = TempDir::new().unwrap();
    let s = write(dir.path(), "s.json", &sine_density().to_string());
    let t = write(
        dir.path(),
        "t.json",
        &json!({"schema": 1, "resolution": 65, "kind": "uniform", "params": {"dim": 1}}).to_string(),
    );
    let map = dir.path().join("map.json");
    let map = map.to_str().unwrap();
    assert!(flowforge(&["kr-build", "--source", &s, "--target", &t, "--out", map]).status.success());
    let stored: Value = serde_json::from_str(&fs::read_to_string(map).unwrap()).unwrap();
    assert_eq!(stored["schema"], 1);

    let pts = write(dir.path(), "pts.csv", "x_1\n0.25\n0.5\n");
    let traj = dir.path().join("traj.csv");
    let out = flowforge(&[
        "flow-sample", "--field", map, "--points", &pts, "--out", traj.to_str().unwrap(), "--steps", "20",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&traj).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,x_1,l,r"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2 * 21);
    // At x = 0.5 the sine map has T(0.5) = 0.5 + 1/(2π) and T'(0.5) = π(0.5)/ρ = 1.
    let end = &rows[41];
    assert_eq!(end[0], 1.0);
    assert!((end[1] - (0.5 + 0.5 / std::f64::consts::PI)).abs() < 1e-3, "{end:?}");
    assert!(end[2].abs() < 1e-3);
    assert!(end[3] < 1e-6);
}

#[test]
fn metrics_between_densities_and_samples() {
    let dir = TempDir::new().unwrap();
    let p = write(dir.path(), "p.json", &sine_density().to_string());
    let q = write(
        dir.path(),
        "q.json",
        &json!({"schema": 1, "resolution": 65, "kind": "uniform", "params": {"dim": 1}}).to_string(),
    );
    let out = flowforge(&["metrics", "--kind", "l2", "--p", &p, "--q", &q]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["value"].as_f64().unwrap() - 0.5 / 2f64.sqrt()).abs() < 1e-3);

    let a = write(dir.path(), "a.csv", "0.2\n0.4\n");
    let b = write(dir.path(), "b.csv", "0.3\n0.5\n");
    let out = flowforge(&["metrics", "--kind", "wasserstein", "--p", &a, "--q", &b, "--order", "inf"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["value"].as_f64().unwrap() - 0.1).abs() < 1e-12);
    let short = write(dir.path(), "c.csv", "0.3\n");
    let out = flowforge(&["metrics", "--kind", "wasserstein", "--p", &a, "--q", &short]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn training_is_reproducible_under_a_seed() {
    let dir = TempDir::new().unwrap();
    let config = json!({
        "schema": 1,
        "source": {"schema": 1, "resolution": 33, "kind": "sine1d", "params": {"amplitude": 0.5}},
        "target": {"schema": 1, "resolution": 33, "kind": "uniform", "params": {"dim": 1}},
        "architecture": {"dim": 1, "width": 4, "layers": 1, "step": 1.0},
        "lambda": 0.1,
        "learning_rate": 0.01,
        "batch_size": 8,
        "max_iters": 6,
        "integrator": {"steps": 8},
        "optimizer": "adam",
        "dataset_size": 64,
        "kl_samples": 64,
        "report_every": 2
    });
    let cfg = write(dir.path(), "c.json", &config.to_string());
    let mut reports = Vec::new();
    for run in 0..2 {
        let weights = dir.path().join(format!("w{run}.json"));
        let report = dir.path().join(format!("r{run}.csv"));
        let out = flowforge(&[
            "train", "--config", &cfg, "--seed", "7",
            "--out", weights.to_str().unwrap(), "--report", report.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        reports.push((fs::read(&report).unwrap(), fs::read(&weights).unwrap()));
    }
    assert_eq!(reports[0], reports[1]);
    let text = String::from_utf8(reports[0].0.clone()).unwrap();
    assert!(text.starts_with("iter,erm_loss,kl_est,reg_est,wallclock_ms\n"));
    // Rows at iterations 0, 2, 4 and the final iteration 5.
    assert_eq!(text.lines().count(), 1 + 4);

    // The trained weights load back as a field.
    let w0 = dir.path().join("w0.json");
    let pts = write(dir.path(), "pts.csv", "0.3\n");
    let traj = dir.path().join("traj.csv");
    let out = flowforge(&[
        "flow-sample", "--field", w0.to_str().unwrap(), "--points", &pts, "--out", traj.to_str().unwrap(),
    ]);
    assert!(out.status.success());
}

#[test]
fn export_density_writes_grid_values() {
    let dir = TempDir::new().unwrap();
    let p = write(dir.path(), "p.json", &sine_density().to_string());
    let csv = dir.path().join("grid.csv");
    assert!(flowforge(&["export-density", "--density", &p, "--out", csv.to_str().unwrap()]).status.success());
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 65);
    let row17: Vec<f64> = text.lines().nth(17).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row17[0], 0.25);
    assert!((row17[1] - 1.5).abs() < 1e-12);
}
