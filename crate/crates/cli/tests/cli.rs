use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn spiketest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spiketest"))
        .args(args)
        .env("SPIKETEST_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = "m = 80\nn_x = 60\nn_y = 60\nshared_spikes = 40:e3\nk = 2\nreps = 20\ncalibration_reps = 100\nseed = 5\ntheta_x = 60\nu_x = e1\ntheta_y = 60\nu_y = e2\n";

#[test]
fn simulate_is_deterministic_and_reproducible_from_provenance() {
    let dir = TempDir::new().unwrap();
    let config = write(dir.path(), "small.cfg", SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&spiketest(&["simulate", s(&config), s(&a)])), 0);
    assert_eq!(code(&spiketest(&["simulate", s(&config), s(&b)])), 0);
    for file in ["X.csv", "Y.csv", "provenance.cfg"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let x = fs::read_to_string(a.join("X.csv")).unwrap();
    assert_eq!(x.lines().count(), 80);
    assert!(x.lines().all(|line| line.split(',').count() == 60));
    assert!(!x.contains('\r'));

    let provenance = fs::read_to_string(a.join("provenance.cfg")).unwrap();
    assert!(provenance.contains("seed = 5"));
    let c = dir.path().join("c");
    assert_eq!(code(&spiketest(&["simulate", s(&a.join("provenance.cfg")), s(&c)])), 0);
    assert_eq!(fs::read(a.join("X.csv")).unwrap(), fs::read(c.join("X.csv")).unwrap());

    let other = dir.path().join("other");
    assert_eq!(code(&spiketest(&["simulate", s(&config), s(&other), "--rep", "3"])), 0);
    assert_ne!(fs::read(a.join("X.csv")).unwrap(), fs::read(other.join("X.csv")).unwrap());
}

#[test]
fn self_test_never_rejects_t1() {
    let dir = TempDir::new().unwrap();
    let config = write(dir.path(), "small.cfg", SMALL);
    let data = dir.path().join("data");
    assert_eq!(code(&spiketest(&["simulate", s(&config), s(&data)])), 0);
    let x = data.join("X.csv");
    let out = spiketest(&["test", "T1", "2", s(&x), s(&x)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = String::from_utf8(out.stdout).unwrap();
    assert!(report.contains("\"method\": \"T1\""));
    assert!(report.contains("\"p_value\": 1.0"));
}

#[test]
fn orientation_alternative_rejects_t2() {
    let dir = TempDir::new().unwrap();
    let config = write(dir.path(), "small.cfg", SMALL);
    let data = dir.path().join("data");
    assert_eq!(code(&spiketest(&["simulate", s(&config), s(&data)])), 0);
    let out = spiketest(&["test", "t2", "2", s(&data.join("X.csv")), s(&data.join("Y.csv"))]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let report = String::from_utf8(out.stdout).unwrap();
    assert!(report.contains("\"reject\": true"));
}

#[test]
fn errors_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.csv");
    assert_eq!(code(&spiketest(&["test", "T1", "1", s(&missing), s(&missing)])), 1);

    let config = write(dir.path(), "small.cfg", SMALL);
    let data = dir.path().join("data");
    assert_eq!(code(&spiketest(&["simulate", s(&config), s(&data)])), 0);
    let (x, y) = (data.join("X.csv"), data.join("Y.csv"));
    let out = spiketest(&["test", "T3", "2", s(&x), s(&y)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("calibration"));
    assert_eq!(code(&spiketest(&["test", "T6", "2", s(&x), s(&y)])), 1);
    assert_eq!(code(&spiketest(&["bogus"])), 1);

    let zero = write(dir.path(), "zero.cfg", &SMALL.replace("reps = 20", "reps = 0"));
    assert_eq!(code(&spiketest(&["power", s(&zero), s(&dir.path().join("p.csv"))])), 1);
}

#[test]
fn residual_parameters_can_be_supplied_directly() {
    let dir = TempDir::new().unwrap();
    let config = write(dir.path(), "small.cfg", SMALL);
    let data = dir.path().join("data");
    assert_eq!(code(&spiketest(&["simulate", s(&config), s(&data)])), 0);
    let x = data.join("X.csv");
    let args = ["--lambda-plus", "1.0", "--sigma-plus", "5.0", "--lambda-minus", "1.0", "--sigma-minus", "5.0"];
    let mut full = vec!["test", "T3", "2", s(&x), s(&x)];
    full.extend(args);
    let out = spiketest(&full);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().contains("\"kind\": \"bonferroni_normal\""));
}

#[test]
fn calibration_files_feed_the_baseline_tests() {
    let dir = TempDir::new().unwrap();
    let config = write(dir.path(), "small.cfg", SMALL);
    let first = dir.path().join("t5a.cal");
    let second = dir.path().join("t5b.cal");
    assert_eq!(code(&spiketest(&["calibrate", "T5", s(&config), s(&first)])), 0);
    assert_eq!(code(&spiketest(&["calibrate", "T5", s(&config), s(&second)])), 0);
    assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());

    let data = dir.path().join("data");
    assert_eq!(code(&spiketest(&["simulate", s(&config), s(&data)])), 0);
    let (x, y) = (data.join("X.csv"), data.join("Y.csv"));
    let out = spiketest(&["test", "T5", "2", s(&x), s(&y), "--calibration", s(&first), "--config", s(&config)]);
    assert!(matches!(code(&out), 0 | 2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().contains("\"kind\": \"empirical\""));

    let out = spiketest(&["test", "T4", "2", s(&x), s(&y), "--calibration", s(&first)]);
    assert_eq!(code(&out), 1);
}

#[test]
fn power_table_has_the_documented_columns() {
    let dir = TempDir::new().unwrap();
    let text = format!(
        "{}methods = T1,T2\nscenario.1.id = same\nscenario.1.theta_x = 60\nscenario.1.u_x = e1\nscenario.1.theta_y = 60\nscenario.1.u_y = e1\nscenario.2.id = rotated\nscenario.2.theta_x = 60\nscenario.2.u_x = e1\nscenario.2.theta_y = 60\nscenario.2.u_y = e2\n",
        SMALL.replace("theta_x = 60\nu_x = e1\ntheta_y = 60\nu_y = e2\n", "")
    );
    let config = write(dir.path(), "study.cfg", &text);
    let out_csv = dir.path().join("power.csv");
    let out = spiketest(&["power", s(&config), s(&out_csv)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(&out_csv).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next().unwrap(),
        "scenario_id,method,m,n_X,n_Y,theta_X,u_X,theta_Y,u_Y,reps,power,mc_stderr"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    let rotated = rows.iter().find(|r| r.starts_with("rotated,T2,80,60,60,60,e1,60,e2,20,")).expect("rotated T2 row");
    let power: f64 = rotated.split(',').nth(10).unwrap().parse().unwrap();
    assert!(power >= 0.9, "{rotated}");

    let only = dir.path().join("only.csv");
    assert_eq!(code(&spiketest(&["power", s(&config), s(&only), "--scenario", "same"])), 0);
    assert_eq!(fs::read_to_string(&only).unwrap().lines().count(), 3);
    assert_eq!(code(&spiketest(&["power", s(&config), s(&only), "--scenario", "absent"])), 1);
}

#[test]
fn lab_runs_selected_checks_deterministically() {
    let dir = TempDir::new().unwrap();
    let grid = write(
        dir.path(),
        "grid.cfg",
        "m = 40, 80\ntheta = 30, 60\nproportions = 1, 0.5\nreps = 5\neps = 1\ndistribution_m = 40\ndistribution_reps = 20\n",
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&spiketest(&["lab", "all", s(&grid), s(&a)])), 0);
    assert_eq!(code(&spiketest(&["lab", "all", s(&grid), s(&b)])), 0);
    for file in ["summary.json", "observations.csv", "double-dot.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let c = dir.path().join("c");
    assert_eq!(code(&spiketest(&["lab", "eigenvalue", s(&grid), s(&c)])), 0);
    assert!(c.join("eigenvalue.json").exists());
    assert!(!c.join("angle.json").exists());
    assert_eq!(code(&spiketest(&["lab", "no-such-check", s(&grid), s(&c)])), 1);
}
