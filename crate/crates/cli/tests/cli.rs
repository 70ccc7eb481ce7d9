use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const GRID: &str = r#"{
  "n_pq": 1,
  "slack_voltage": {"re": 1.0, "im": 0.0},
  "branches": [{"from": 0, "to": 1, "y_series": {"re": 1.0, "im": 0.0}}]
}"#;

const SECURITY: &str = r#"{"vmin": 0.9, "vmax": 1.1, "imax": 1.0}"#;

const SINGLETON: &str = r#"{"buses": [{"point": {"re": 0.0, "im": 0.0}}]}"#;

const BOX: &str = r#"{"buses": [{"half_planes": [[1, 0, 0], [-1, 0, 0.3], [0, 1, 0], [0, -1, 0]]}]}"#;

const TEMPLATE: &str =
    r#"{"buses": [{"half_planes": [[1, 0, 0], [-1, 0, 1], [0, 1, 0], [0, -1, 0]]}], "kappa_template": true}"#;

struct Case {
    dir: TempDir,
}

impl Case {
    fn new() -> Self {
        let c = Self {
            dir: TempDir::new().unwrap(),
        };
        c.file("grid.json", GRID);
        c.file("security.json", SECURITY);
        c
    }

    fn file(&self, name: &str, contents: &str) -> PathBuf {
        let p = self.dir.path().join(name);
        fs::write(&p, contents).unwrap();
        p
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_gridcert"))
            .current_dir(self.dir.path())
            .args(args)
            .output()
            .unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("terminated by signal")
}

fn report(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn singleton_is_admissible() {
    let c = Case::new();
    c.file("u.json", SINGLETON);
    let o = c.run(&[
        "admissibility", "--grid", "grid.json", "--security", "security.json",
        "--uncertainty", "u.json", "--order", "2", "--report", "r.json",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&c.path("r.json"));
    assert_eq!(r["command"], "admissibility");
    assert_eq!(r["outcome"], "admissible");
    assert_eq!(r["verdict"]["result"], "admissible");
    assert_eq!(r["verdict"]["evidence"]["p0"].as_array().unwrap().len(), 7);
}

#[test]
fn box_past_the_nose_is_unknown() {
    let c = Case::new();
    c.file("u.json", BOX);
    let o = c.run(&[
        "admissibility", "--grid", "grid.json", "--security", "security.json",
        "--uncertainty", "u.json", "--report", "r.json",
    ]);
    assert_eq!(code(&o), 2);
    let r = report(&c.path("r.json"));
    assert_eq!(r["outcome"], "unknown");
    assert_eq!(r["verdict"]["failure"]["kind"], "boundary_not_excluded");
}

#[test]
fn insecure_initial_state_is_a_precondition_failure() {
    let c = Case::new();
    c.file("u.json", SINGLETON);
    c.file("v0.json", r#"[{"re": 0.85, "im": 0.0}]"#);
    let o = c.run(&[
        "admissibility", "--grid", "grid.json", "--security", "security.json",
        "--uncertainty", "u.json", "--initial", "v0.json",
    ]);
    assert_eq!(code(&o), 3);
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["outcome"], "precondition_violated");
}

#[test]
fn missing_and_malformed_inputs() {
    let c = Case::new();
    let o = c.run(&[
        "admissibility", "--grid", "nope.json", "--security", "security.json",
        "--uncertainty", "u.json",
    ]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.json"));

    c.file("bad.json", "{\n  \"n_pq\": 1,\n  \"slack_voltage\": 3\n}");
    let o = c.run(&["vset", "--grid", "bad.json", "--security", "security.json"]);
    assert_eq!(code(&o), 4);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3"), "{err}");

    let o = c.run(&["vset", "--grid", "grid.json"]);
    assert_eq!(code(&o), 4);
    let o = c.run(&["frobnicate"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn vset_report_lists_constraints() {
    let c = Case::new();
    let o = c.run(&[
        "vset", "--grid", "grid.json", "--security", "security.json", "--lambda-step", "0.01",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["outcome"], "calibrated");
    assert_eq!(r["constraints"].as_array().unwrap().len(), 7);
    let lambda = r["lambda_star"].as_f64().unwrap();
    assert!((lambda - 0.45).abs() < 1e-9, "{lambda}");
}

#[test]
fn max_kappa_brackets_the_analytic_value() {
    let c = Case::new();
    c.file("t.json", TEMPLATE);
    let o = c.run(&[
        "max-kappa", "--grid", "grid.json", "--security", "security.json",
        "--uncertainty", "t.json", "--resolution", "0.01", "--parallel", "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let k = r["kappa_star"].as_f64().unwrap();
    assert!((0.07..=0.09).contains(&k), "{k}");
}

#[test]
fn oracle_is_reproducible_and_dumps_csv() {
    let c = Case::new();
    c.file("u.json", BOX);
    let args = [
        "oracle", "--grid", "grid.json", "--security", "security.json", "--uncertainty", "u.json",
        "--probe", "paths", "--paths", "6", "--steps", "20", "--seed", "11", "--csv-dir", "traj",
    ];
    let a = c.run(&args);
    let b = c.run(&args);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let r: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(r["probe"], "paths");
    assert!(!r["violations"].as_array().unwrap().is_empty());
    let csv = fs::read_to_string(c.path("traj").join("path_0000.csv")).unwrap();
    assert!(csv.starts_with("t,re_v1,im_v1\n"));
}

#[test]
fn admissibility_reports_repeat_without_timings() {
    let c = Case::new();
    c.file("u.json", SINGLETON);
    let args = [
        "admissibility", "--grid", "grid.json", "--security", "security.json",
        "--uncertainty", "u.json", "--no-timings",
    ];
    let a = c.run(&args);
    let b = c.run(&args);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn loadflow_follows_and_loses_the_branch() {
    let c = Case::new();
    c.file("s_ok.json", r#"[{"re": -0.2, "im": 0.0}]"#);
    c.file("s_bad.json", r#"[{"re": -0.3, "im": 0.0}]"#);
    let o = c.run(&["loadflow", "--grid", "grid.json", "--injection", "s_ok.json", "--steps", "20", "--csv", "ok.csv"]);
    assert_eq!(code(&o), 0);
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let v = r["v_final"][0]["re"].as_f64().unwrap();
    assert!((v - (1.0 + 0.2f64.sqrt()) / 2.0).abs() < 1e-9);
    assert_eq!(fs::read_to_string(c.path("ok.csv")).unwrap().lines().count(), 22);

    let o = c.run(&["loadflow", "--grid", "grid.json", "--injection", "s_bad.json", "--steps", "20"]);
    assert_eq!(code(&o), 2);
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["converged"], false);
    assert!(r["t_last_good"].as_f64().unwrap() * 0.3 <= 0.25);
}

#[test]
fn help_exits_cleanly() {
    let c = Case::new();
    assert_eq!(code(&c.run(&["--help"])), 0);
    assert_eq!(code(&c.run(&["admissibility", "--help"])), 0);
}
