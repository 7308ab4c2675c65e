use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn hmcert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hmcert")).args(args).output().unwrap()
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        cmd,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    hmcert(&args)
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TWO_STATE: &str = r#"
states = 2
grid = [0.0, 1.0]
lyapunov = [0.0, 1.0]

[[point]]
kernel = [[0.9, 0.1], [0.2, 0.8]]
f = [1.0, 2.0]

[[point]]
kernel = [[0.85, 0.15], [0.2, 0.8]]
f = [1.0, 2.5]
"#;

fn write_case(dir: &Path, model: &str) -> PathBuf {
    fs::write(dir.join("model.toml"), model).unwrap();
    let cfg = dir.join("run.toml");
    fs::write(&cfg, "[model]\npath = \"model.toml\"\n\n[checks]\ntrials = 40\n").unwrap();
    cfg
}

#[test]
fn every_command_succeeds_on_valid_model() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_case(tmp.path(), TWO_STATE);
    let out = tmp.path().join("out");
    for cmd in ["validate", "certify", "solve", "sweep"] {
        let o = run(cmd, &cfg, &out, &[]);
        assert_eq!(code(&o), 0, "{cmd}: {}", stderr(&o));
        assert!(out.join(format!("{cmd}.json")).exists());
    }
    for csv in [
        "certify_constants.csv",
        "solve_points.csv",
        "solve_u.csv",
        "sweep_pairs.csv",
    ] {
        assert!(out.join(csv).exists(), "{csv}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("solve.json")).unwrap()).unwrap();
    assert!(report.is_object());
}

#[test]
fn bad_row_sum_is_a_model_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_case(
        tmp.path(),
        &TWO_STATE.replace("[[0.85, 0.15], [0.2, 0.8]]", "[[0.85, 0.15], [0.2, 0.79]]"),
    );
    let o = run("validate", &cfg, &tmp.path().join("out"), &[]);
    assert_eq!(code(&o), 7);
    let msg = stderr(&o);
    assert!(msg.contains("grid point 1") && msg.contains("row 1"), "{msg}");
    let failure = fs::read_to_string(tmp.path().join("out/validate.json")).unwrap();
    assert!(failure.contains("\"exit_code\": 7"), "{failure}");
}

#[test]
fn missing_config_is_io_error() {
    let tmp = TempDir::new().unwrap();
    let o = run("certify", &tmp.path().join("nope.toml"), &tmp.path().join("out"), &[]);
    assert_eq!(code(&o), 6, "{}", stderr(&o));
}

#[test]
fn malformed_config_is_parse_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[model\npath = 1").unwrap();
    assert_eq!(code(&run("validate", &cfg, &tmp.path().join("out"), &[])), 2);
    fs::write(&cfg, "[model]\npath = \"m.toml\"\n[certify]\nbogus = 1\n").unwrap();
    assert_eq!(code(&run("validate", &cfg, &tmp.path().join("out"), &[])), 2);
}

#[test]
fn periodic_model_fails_minorization() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = run("certify", &configs().join("periodic.toml"), &out, &[]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let failure = fs::read_to_string(out.join("certify.json")).unwrap();
    assert!(
        failure.contains("ZeroMinorization") || failure.contains("EmptySmallSet"),
        "{failure}"
    );
    assert!(failure.contains("minorization"));
}

#[test]
fn r_step_fixture_reports_r_two() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = run("certify", &configs().join("r_step.toml"), &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("certify.json")).unwrap()).unwrap();
    assert_eq!(report["bundle"]["r_step"]["r"], 2);
}

#[test]
fn sweep_is_byte_identical_across_runs_and_workers() {
    let tmp = TempDir::new().unwrap();
    let cfg = configs().join("example.toml");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&run("sweep", &cfg, &a, &["--seed", "5", "--workers", "1"])), 0);
    assert_eq!(code(&run("sweep", &cfg, &b, &["--seed", "5", "--workers", "4"])), 0);
    for f in ["sweep.json", "sweep_pairs.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn tol_flag_changes_series_length() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_case(tmp.path(), TWO_STATE);
    let terms = |tol: &str| {
        let out = tmp.path().join(tol);
        assert_eq!(code(&run("solve", &cfg, &out, &["--tol", tol])), 0);
        fs::read_to_string(out.join("solve_points.csv")).unwrap()
    };
    assert_ne!(terms("1e-4"), terms("1e-12"));
}
