use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_barrier-mbrl"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn simulate_bundled_config_short_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("two_state.toml");
    let o = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "t_final=1.0",
        "--set",
        "dt=1e-3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(dir.path());
    assert_eq!(s["safety_ok"], true);
    assert_eq!(s["status"], "ok");
    assert_eq!(s["seed"], 0);
    assert_eq!(s["dt"], 1e-3);
    assert!(s["total_cost"].as_f64().unwrap() > 0.0);
    let csv = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("t,x1,x2,s1,s2,u1,"));
    // header + 1001 samples at the default 1e-3 interval
    assert_eq!(csv.lines().count(), 1002);
    let leftovers: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains(".tmp"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn seed_flag_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "simulate",
        "--out",
        dir.path().to_str().unwrap(),
        "--seed",
        "42",
        "--set",
        "t_final=0.05",
        "--set",
        "n_extrap=5",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(summary(dir.path())["seed"], 42);
}

#[test]
fn x0_outside_box_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["simulate", "--out", dir.path().to_str().unwrap(), "--set", "x0=[-8.0, 0.0]"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("inside the box"));
    assert!(!dir.path().join("summary.json").exists());
}

#[test]
fn unknown_override_key_is_a_config_error() {
    let o = run(&["simulate", "--set", "not_a_key=1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_config_file_is_a_config_error() {
    let o = run(&["simulate", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_suite_prints_usage() {
    let o = run(&["check", "nope"]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("possible values") && err.contains("lemma1"), "{err}");
}

#[test]
fn lqr_oracle_suite_passes() {
    let o = run(&["check", "lqr-oracle"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().count(), 2);
    assert!(out.lines().all(|l| l.starts_with("ok")), "{out}");
}

#[test]
fn divergence_exits_with_runtime_code() {
    let dir = tempfile::tempdir().unwrap();
    // a huge freeze bound makes the estimate filter stiff at this step size
    let o = run(&[
        "simulate",
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "dt=1e-3",
        "--set",
        "y_f_bound=1e6",
        "--set",
        "t_final=2.0",
        "--set",
        "n_extrap=5",
    ]);
    assert_eq!(code(&o), 1);
    let s = summary(dir.path());
    assert_eq!(s["status"], "numerical_divergence");
    assert!(dir.path().join("trajectory.csv").exists());
}

#[test]
fn sweep_writes_ordered_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "sweep",
        "--param",
        "k_a2",
        "--values",
        "0.01,0.0001",
        "--parallel",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "t_final=0.2",
        "--set",
        "n_extrap=5",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "parameter,value,cost,safety_ok,status");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("k_a2,1.0000000000000000e-2,"));
    assert!(lines[2].starts_with("k_a2,1.0000000000000000e-4,"));
    assert!(lines[1..].iter().all(|l| l.ends_with(",1,ok")));
}

#[test]
fn sweep_rejects_non_gain_parameter() {
    let o = run(&["sweep", "--param", "dt", "--values", "1e-3"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn replay_with_zero_weights_applies_no_input() {
    // open loop drifts out of the box within a few hundredths of a second
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "replay",
        "--weights",
        "0,0,0",
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "t_final=0.1",
        "--set",
        "n_extrap=5",
    ]);
    assert_eq!(code(&o), 1);
    assert_eq!(summary(dir.path())["status"], "safety_violation");
    let csv = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(csv.lines().count() > 10);
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let u = header.iter().position(|c| *c == "u1").unwrap();
    for line in csv.lines().skip(1) {
        let v: f64 = line.split(',').nth(u).unwrap().parse().unwrap();
        assert_eq!(v, 0.0);
    }
}

#[test]
fn replay_reads_weights_from_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let common = ["--out", out, "--set", "t_final=0.2", "--set", "n_extrap=5"];
    assert_eq!(code(&run(&[&["simulate"][..], &common].concat())), 0);
    let learned = summary(dir.path())["w_c"].clone();
    let path = dir.path().join("summary.json");
    let o = run(&[&["replay", "--summary", path.to_str().unwrap()][..], &common].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // learning is off in a replay, so the critic weights stay where they started
    assert_eq!(summary(dir.path())["w_c"], learned);
}
