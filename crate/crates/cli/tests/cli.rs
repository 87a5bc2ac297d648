use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const LORENZ: &str = r#"
threads = 2
[system]
kind = "lorenz"
bounds = [[1.0, 20.0], [10.0, 40.0], [0.5, 5.0]]
[grid]
dx = 10.0
[data]
t_end = 4.0
[infer]
theta0 = [9.0, 28.0, 2.6666666666666665]
max_iters = 2
"#;

fn measinv(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_measinv"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("MEASINV_THREADS")
        .output()
        .expect("binary runs")
}

fn setup(config: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn pipeline_writes_expected_files() {
    let dir = setup(LORENZ);
    let d = dir.path();
    for cmd in ["simulate", "steady", "hist"] {
        let out = measinv(d, &[cmd, "--config", "run.toml", "--out", cmd]);
        assert!(out.status.success(), "{cmd}: {}", stderr(&out));
        assert!(d.join(cmd).join("config.resolved.toml").exists());
    }
    let csv = fs::read_to_string(d.join("simulate/trajectory.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("t,x,y,z"));
    assert_eq!(csv.lines().count(), 1 + 4001);

    let dist = format!(
        "{LORENZ}\n[io]\ndensity_a = \"steady/steady.bin\"\ndensity_b = \"hist/density.bin\"\n"
    );
    fs::write(d.join("dist.toml"), dist).unwrap();
    let out = measinv(d, &["dist", "--config", "dist.toml", "--out", "dist"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: toml::Table = fs::read_to_string(d.join("dist/dist.toml")).unwrap().parse().unwrap();
    let cost = summary["cost"].as_float().unwrap();
    let dual = summary["dual_cost"].as_float().unwrap();
    assert!(cost > 0.0 && dual <= cost * (1.0 + 1e-9));
    assert!(d.join("dist/phi.bin").exists() && d.join("dist/psi.bin").exists());
}

#[test]
fn hist_reads_trajectory_file_and_sweeps() {
    let dir = setup(LORENZ);
    let d = dir.path();
    assert!(measinv(d, &["simulate", "--config", "run.toml", "--out", "sim"]).status.success());
    let cfg = LORENZ.replace("t_end = 4.0", "t_end = 4.0\nsweep = [100, 1000]")
        + "[io]\ntrajectory = \"sim/trajectory.csv\"\n";
    fs::write(d.join("hist.toml"), cfg).unwrap();
    let out = measinv(d, &["hist", "--config", "hist.toml", "--out", "h"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let sweep = fs::read_to_string(d.join("h/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
    let summary: toml::Table = fs::read_to_string(d.join("h/hist.toml")).unwrap().parse().unwrap();
    assert!(summary["sweep_l2_slope"].as_float().unwrap() < 0.0);
}

#[test]
fn infer_trace_and_gradcheck() {
    let dir = setup(LORENZ);
    let d = dir.path();
    let out = measinv(d, &["infer", "--config", "run.toml", "--out", "inf"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let trace = fs::read_to_string(d.join("inf/trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("iter,k,theta_1,theta_2,theta_3,f,grad_norm,tau,wall_ms"));
    assert_eq!(lines.count(), 3);

    let out = measinv(d, &["gradcheck", "--config", "run.toml", "--out", "gc"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let mut rdr = csv::Reader::from_path(d.join("gc/gradcheck.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        let ift_vs_adjoint: f64 = r[4].parse().unwrap();
        assert!(ift_vs_adjoint < 1e-8, "{r:?}");
    }
}

#[test]
fn resolved_config_reloads() {
    let dir = setup(LORENZ);
    let d = dir.path();
    assert!(measinv(d, &["steady", "--config", "run.toml", "--out", "a"]).status.success());
    let out = measinv(d, &["steady", "--config", "a/config.resolved.toml", "--out", "b"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        fs::read(d.join("a/steady.bin")).unwrap(),
        fs::read(d.join("b/steady.bin")).unwrap()
    );
}

#[test]
fn config_errors_exit_2() {
    let dir = setup(&LORENZ.replace("dx = 10.0", "dx = 10.0\nspacing = 1.0"));
    let out = measinv(dir.path(), &["steady", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("spacing"), "{}", stderr(&out));

    let out = measinv(dir.path(), &["steady"]);
    assert_eq!(out.status.code(), Some(2));

    let dir = setup(LORENZ);
    let out = Command::new(env!("CARGO_BIN_EXE_measinv"))
        .args(["steady", "--config", "run.toml"])
        .current_dir(dir.path())
        .env("MEASINV_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_exits_4() {
    let dir = setup(&format!("{LORENZ}\n[io]\ndensity_a = \"nope.bin\"\ndensity_b = \"nope.bin\"\n"));
    let out = measinv(dir.path(), &["dist", "--config", "run.toml", "--out", "o"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));

    let dir = setup(LORENZ);
    let out = measinv(dir.path(), &["simulate", "--config", "missing.toml"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn divergence_exits_3() {
    let dir = setup(&LORENZ.replace("t_end = 4.0", "t_end = 50.0\ndt = 0.5"));
    let out = measinv(dir.path(), &["simulate", "--config", "run.toml", "--out", "o"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}
