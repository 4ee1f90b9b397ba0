//! End-to-end tests of the `waveqed` binary: exit codes, artifact
//! layout, and the byte stability of the deterministic engines.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn waveqed() -> Command {
    Command::new(env!("CARGO_BIN_EXE_waveqed"))
}

fn run(args: &[&str]) -> Output {
    waveqed().args(args).output().expect("binary should spawn")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("binary should not be killed by a signal")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout should be utf-8")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, body).expect("config should be writable");
    path
}

/// The only file in `dir` whose name ends with `suffix`.
fn find_file(dir: &Path, suffix: &str) -> PathBuf {
    let mut hits: Vec<PathBuf> = fs::read_dir(dir)
        .expect("output dir should exist")
        .map(|e| e.expect("dir entry should read").path())
        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().ends_with(suffix)))
        .collect();
    assert_eq!(hits.len(), 1, "expected one '{suffix}' file in {}", dir.display());
    hits.pop().unwrap()
}

fn read_json(path: &Path) -> Value {
    let text = fs::read_to_string(path).expect("json artifact should exist");
    serde_json::from_str(&text).expect("artifact should be valid json")
}

const SHORT_ED: &str = "
[system]
n = 2

[engine]
kind = \"ed\"

[time]
t_total = 1.0
dt = 0.001
";

#[test]
fn run_artifacts_are_byte_reproducible() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), SHORT_ED);
    let dir = tmp.path().join("out");
    let args = [
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ];

    let out = run(&args);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let csv = find_file(&dir, ".csv");
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("t,observable,value,stderr,engine,run_id\n"));

    let json = find_file(&dir, ".json");
    let summary = read_json(&json);
    assert!(summary["peak_ir"]["value"].as_f64().unwrap().is_finite());
    assert!(summary["config_hash"].as_u64().is_some());
    assert_eq!(summary["engine"], "ed");

    let first_csv = fs::read(&csv).unwrap();
    let first_json = fs::read(&json).unwrap();
    let out = run(&args);
    assert_eq!(exit_code(&out), 0);
    assert_eq!(fs::read(&csv).unwrap(), first_csv);
    assert_eq!(fs::read(&json).unwrap(), first_json);
}

#[test]
fn dense_guard_maps_to_exit_code_3() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(
        tmp.path(),
        "
[system]
n = 13

[time]
t_total = 0.01
dt = 0.001
",
    );
    let out = run(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--engine",
        "ed",
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn bad_configs_exit_with_code_2() {
    let tmp = TempDir::new().unwrap();
    let cases: [&str; 3] = [
        "[[system",
        "[system]\nunknown_knob = 1\n",
        "[engine]\nkind = \"montecarlo\"\n",
    ];
    for (i, body) in cases.iter().enumerate() {
        let path = tmp.path().join(format!("bad{i}.toml"));
        fs::write(&path, body).unwrap();
        let out = run(&["run", "--config", path.to_str().unwrap()]);
        assert_eq!(exit_code(&out), 2, "case {i} should be a config error");
    }

    let out = run(&["run", "--preset", "superradiant"]);
    assert_eq!(exit_code(&out), 2, "unknown preset should be a config error");
}

#[test]
fn epsilon_scan_anchors_the_commensurate_peak() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(
        tmp.path(),
        "
[system]
n = 2

[engine]
kind = \"ed\"

[time]
t_total = 3.0
dt = 0.001
",
    );
    let scan_dir = tmp.path().join("scan");
    let out = run(&[
        "scan-epsilon",
        "--config",
        config.to_str().unwrap(),
        "--out",
        scan_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let index = read_json(&scan_index_path(&scan_dir));
    let points = index["points"].as_array().unwrap();
    assert_eq!(points.len(), 5);
    assert!(index["failures"].as_array().unwrap().is_empty());
    assert!(index["fit"]["c2"].as_f64().unwrap() < 0.0);

    let table = fs::read_to_string(scan_table_path(&scan_dir)).unwrap();
    assert!(table.starts_with("epsilon,peak,peak_time,predicted,run_id,status\n"));

    let plain_dir = tmp.path().join("plain");
    let out = run(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        plain_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0);
    let summary = read_json(&find_file(&plain_dir, ".json"));
    let plain_peak = summary["peak_ir"]["value"].as_f64().unwrap();
    let scan_peak = points[0]["peak"].as_f64().unwrap();
    assert_eq!(points[0]["epsilon"].as_f64().unwrap(), 0.0);
    assert!((plain_peak - scan_peak).abs() < 1e-15);

    let anchor = index["prediction"][0]["predicted"].as_f64().unwrap();
    assert!((anchor - scan_peak).abs() < 1e-15);
}

/// Path of the single scan index in `dir`.
fn scan_index_path(dir: &Path) -> PathBuf {
    let mut hits: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            name.starts_with("scan-") && name.ends_with(".json")
        })
        .collect();
    assert_eq!(hits.len(), 1);
    hits.pop().unwrap()
}

/// Path of the single scan table in `dir`.
fn scan_table_path(dir: &Path) -> PathBuf {
    let mut hits: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            name.starts_with("scan-") && name.ends_with(".csv")
        })
        .collect();
    assert_eq!(hits.len(), 1);
    hits.pop().unwrap()
}

#[test]
fn scans_continue_past_bad_points_and_exit_5() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(
        tmp.path(),
        "
[system]
n = 2

[engine]
kind = \"ed\"

[time]
t_total = 0.5
dt = 0.001
",
    );
    let scan_dir = tmp.path().join("scan");
    let out = run(&[
        "scan-epsilon",
        "--config",
        config.to_str().unwrap(),
        "--epsilons=0,-1.5,0.01",
        "--out",
        scan_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 5, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let index = read_json(&scan_index_path(&scan_dir));
    assert_eq!(index["points"].as_array().unwrap().len(), 2);
    let failures = index["failures"].as_array().unwrap();
    assert_eq!(failures.len(), 1);
    assert_eq!(failures[0]["epsilon"].as_f64().unwrap(), -1.5);
    assert!(!failures[0]["error"].as_str().unwrap().is_empty());

    let table = fs::read_to_string(scan_table_path(&scan_dir)).unwrap();
    assert!(table.lines().any(|l| l.starts_with("-1.5,,,,,")));
}

#[test]
fn compare_judges_deviation_and_annotates_cost() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), SHORT_ED);
    let ed_dir = tmp.path().join("ed");
    let tn_dir = tmp.path().join("tn");

    let out = run(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        ed_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0);
    let out = run(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--engine",
        "tn",
        "--out",
        tn_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0);

    let ed_summary = find_file(&ed_dir, ".json");
    let tn_summary = find_file(&tn_dir, ".json");
    let report_dir = tmp.path().join("cmp");
    let out = run(&[
        "compare",
        tn_summary.to_str().unwrap(),
        ed_summary.to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let report = read_json(&find_file(&report_dir, ".json"));
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for row in rows {
        let metric = row["metric"].as_f64().unwrap();
        assert!((0.0..1e-3).contains(&metric), "tn should track ed closely: {metric}");
    }
    assert_eq!(report["a"]["cost"].as_f64().unwrap(), 2.0 * 256.0f64.powi(3));
    assert!(report["b"]["cost"].is_null());

    let self_dir = tmp.path().join("self");
    let out = run(&[
        "compare",
        ed_summary.to_str().unwrap(),
        ed_summary.to_str().unwrap(),
        "--out",
        self_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0);
    let report = read_json(&find_file(&self_dir, ".json"));
    for row in report["rows"].as_array().unwrap() {
        assert_eq!(row["metric"].as_f64().unwrap(), 0.0);
    }
}

#[test]
fn compare_rejects_horizons_beyond_overlap() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), SHORT_ED);
    let dir = tmp.path().join("run");
    let out = run(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0);

    let summary = find_file(&dir, ".json");
    let out = run(&[
        "compare",
        summary.to_str().unwrap(),
        summary.to_str().unwrap(),
        "--t-final",
        "50.0",
    ]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn out_env_var_is_honored() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), SHORT_ED);
    let env_dir = tmp.path().join("from-env");

    let out = waveqed()
        .args(["run", "--config", config.to_str().unwrap()])
        .env("WAVEQED_OUT", &env_dir)
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    find_file(&env_dir, ".csv");
    find_file(&env_dir, ".json");
}

#[test]
fn network_engine_writes_training_artifacts() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(
        tmp.path(),
        "
seed = 7

[system]
n = 2

[engine]
kind = \"tnqs\"
d_h = 4
heads = 2
layers = 1
encoder_layers = 1

[time]
t_total = 0.1
dt = 0.001
interval = 0.1

[train]
epochs = 30
lr_milestone_every = 15
curriculum_start = 10
curriculum_increment = 50
curriculum_every = 5
measure_samples = 100
flow_grad_log_every = 10
",
    );
    let dir = tmp.path().join("out");
    let out = run(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let summary = read_json(&find_file(&dir, ".json"));
    assert!(summary["final_loss"].as_f64().unwrap().is_finite());
    let logs = summary["training"].as_array().unwrap();
    assert_eq!(logs.len(), 1);
    assert!(!logs[0]["records"].as_array().unwrap().is_empty());

    let smoothed_name = summary["smoothed_csv"].as_str().unwrap();
    let smoothed = fs::read_to_string(dir.join(smoothed_name)).unwrap();
    assert!(smoothed.starts_with("t,observable,value,stderr,engine,run_id\n"));
    let row = smoothed.lines().nth(1).unwrap();
    assert!(row.ends_with("-smoothed"), "smoothed rows carry a marked run id: {row}");
}

#[test]
fn reference_runs_add_convergence_rows() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), SHORT_ED);
    let ed_dir = tmp.path().join("ed");
    let out = run(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        ed_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0);
    let ed_summary = find_file(&ed_dir, ".json");

    let tn_dir = tmp.path().join("tn");
    let out = run(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--engine",
        "tn",
        "--reference",
        ed_summary.to_str().unwrap(),
        "--out",
        tn_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("deviation[z]"));

    let summary = read_json(&find_file(&tn_dir, ".json"));
    let reference_id = read_json(&ed_summary)["run_id"].as_str().unwrap().to_owned();
    assert_eq!(summary["reference"].as_str().unwrap(), reference_id);
    let rows = summary["convergence"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for row in rows {
        assert!(row["metric"].as_f64().unwrap() < 1e-3);
    }
}

#[test]
fn presets_resolve_expected_physics() {
    let tmp = TempDir::new().unwrap();
    let short = write_config(
        tmp.path(),
        "
[time]
t_total = 0.05
dt = 0.001
",
    );

    let dir = tmp.path().join("di");
    let out = run(&[
        "run",
        "--preset",
        "driven-incommensurate",
        "--config",
        short.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let summary = read_json(&find_file(&dir, ".json"));
    let system = &summary["config"]["system"];
    assert_eq!(system["omega"].as_f64().unwrap(), 1.0);
    assert_eq!(system["gamma_l"].as_f64().unwrap(), 1.0);
    assert_eq!(system["spacing"]["mode"], "uniform-gap");
    let gap = system["spacing"]["gap"].as_f64().unwrap();
    assert!((gap - std::f64::consts::PI / 3f64.sqrt()).abs() < 1e-15);
    assert_eq!(summary["units"], "Gamma");

    let dir = tmp.path().join("ch");
    let out = run(&[
        "run",
        "--preset",
        "chiral",
        "--config",
        short.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0);
    let summary = read_json(&find_file(&dir, ".json"));
    let system = &summary["config"]["system"];
    assert_eq!(system["gamma_l"].as_f64().unwrap(), 0.5);
    assert_eq!(system["gamma_r"].as_f64().unwrap(), 1.0);
    assert_eq!(system["omega"].as_f64().unwrap(), 0.0);
    assert_eq!(summary["units"], "Gamma_R");
}
