//! End-to-end runs of the binary: exit codes, artifacts, reproducibility.

use std::path::{Path, PathBuf};
use std::process::Command;

use mfgmaster::grid::{read_field, write_field_csv};
use mfgmaster::GridField;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mfgmaster"))
}

/// Writes `body` with an `[output]` section pointing into the temp dir; returns the config path.
fn config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let out = dir.join(format!("{name}-out"));
    let text = format!("{body}\n[output]\ndir = {:?}\n", out.display().to_string());
    let path = dir.join(format!("{name}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

fn with_plotdata(cfg: PathBuf) -> PathBuf {
    let text = std::fs::read_to_string(&cfg).unwrap().replace("dir =", "plotdata = true\ndir =");
    std::fs::write(&cfg, text).unwrap();
    cfg
}

fn run(path: &Path, extra: &[&str]) -> (i32, String, String) {
    let out = bin().args(extra).arg("run").arg(path).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn out_dir(cfg: &Path) -> PathBuf {
    let stem = cfg.file_stem().unwrap().to_string_lossy().into_owned();
    cfg.with_file_name(format!("{stem}-out"))
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const LINEAR: &str = r#"
[model]
name = "linear-test"
a = [[1.0, 0.0], [0.0, 1.0]]
discount = 1.0
"#;

const GRID2: &str = "[grid]\nd = 2\nR = 1.0\nh = 0.125\n";

#[test]
fn hypcheck_on_monotone_fixture_passes() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "hyp", &format!("mode = \"hypcheck\"\n{LINEAR}"));
    let (code, _, err) = run(&cfg, &[]);
    assert_eq!(code, 0, "{err}");
    let report = json(out_dir(&cfg).join("report.json"));
    assert_eq!(report["passed"], true);
    assert!(report["reports"].as_array().unwrap().iter().all(|r| r["verdict"] != "fail"));
}

#[test]
fn hypcheck_on_reversed_fixture_fails_with_code_3() {
    let dir = TempDir::new().unwrap();
    let body = "mode = \"hypcheck\"\n[model]\nname = \"linear-test\"\na = [[-1.0, 0.0], [0.0, -1.0]]\n";
    let cfg = config(dir.path(), "hyp", body);
    let (code, _, err) = run(&cfg, &[]);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("monotone"), "{err}");
}

#[test]
fn stationary_then_verify_writes_field_and_report() {
    let dir = TempDir::new().unwrap();
    let body = format!("mode = \"stationary\"\nseed = 5\n{LINEAR}{GRID2}[verify]\ntol = 0.05\nn_samples = 200\n");
    let cfg = config(dir.path(), "stat", &body);
    let (code, out, err) = run(&cfg, &[]);
    assert_eq!(code, 0, "{out}{err}");
    let o = out_dir(&cfg);
    assert!(o.join("field.csv").exists());
    let report = json(o.join("report.json"));
    assert_eq!(report["passed"], true);
    assert_eq!(report["seed"], 5);
    assert!(report["reproduce"].as_str().unwrap().contains("resolved.toml"));
}

#[test]
fn corrupted_field_fails_verification_with_witness() {
    let dir = TempDir::new().unwrap();
    let solve = config(dir.path(), "solve", &format!("mode = \"stationary\"\n{LINEAR}{GRID2}"));
    assert_eq!(run(&solve, &[]).0, 0);
    let field = read_field(&out_dir(&solve).join("field.csv")).unwrap();
    let (grid, times, slices) = field.into_slices();
    let flipped: Vec<Vec<f64>> = slices.into_iter().map(|s| s.into_iter().map(|v| -v).collect()).collect();
    let bad = dir.path().join("flipped.csv");
    write_field_csv(&GridField::new(grid, times, flipped).unwrap(), &bad).unwrap();

    let body = format!(
        "mode = \"verify\"\ninput = {:?}\n{LINEAR}[verify]\ndefinition = \"stationary\"\ntol = 0.01\nn_samples = 200\n",
        bad.display().to_string()
    );
    let cfg = config(dir.path(), "verify", &body);
    let (code, _, err) = run(&cfg, &[]);
    assert_eq!(code, 2, "{err}");
    let report = json(out_dir(&cfg).join("report.json"));
    assert_eq!(report["passed"], false);
    assert!(report["witness"]["x0"].is_array());
}

#[test]
fn config_errors_exit_64() {
    let dir = TempDir::new().unwrap();
    let typo = config(dir.path(), "typo", &format!("mode = \"hypcheck\"\n{LINEAR}[numerics]\ntoll = 1e-3\n"));
    let (code, _, err) = run(&typo, &[]);
    assert_eq!(code, 64);
    assert!(err.contains("toll"), "{err}");
    assert_eq!(run(&dir.path().join("missing.toml"), &[]).0, 64);
    let no_grid = config(dir.path(), "nogrid", &format!("mode = \"stationary\"\n{LINEAR}"));
    assert_eq!(run(&no_grid, &[]).0, 64);
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(64));
}

#[test]
fn solver_failure_exits_1() {
    let dir = TempDir::new().unwrap();
    // dt far above the CFL limit
    let body = format!(
        "mode = \"td\"\n[model]\nname = \"linear-test\"\na = [[1.0, 0.0], [0.0, 1.0]]\nm = [[1.0, 0.0], [0.0, 1.0]]\nq = [[1.0, 0.0], [0.0, 1.0]]\n{GRID2}[numerics]\ndt = 0.5\nt_f = 1.0\n"
    );
    let cfg = config(dir.path(), "cfl", &body);
    let (code, _, err) = run(&cfg, &[]);
    assert_eq!(code, 1, "{err}");
    assert!(err.contains("solve_td"), "{err}");
}

#[test]
fn cyclic_jumps_are_refused_with_code_3() {
    let dir = TempDir::new().unwrap();
    let body = format!(
        "mode = \"impulse\"\n{LINEAR}{GRID2}[numerics]\neps = [0.01]\n[impulse]\ncosts = [[0.0, 1.0], [1.0, 0.0]]\n"
    );
    let cfg = config(dir.path(), "cyc", &body);
    let (code, _, err) = run(&cfg, &[]);
    assert_eq!(code, 3, "{err}");
}

#[test]
fn impulse_two_state_example() {
    let dir = TempDir::new().unwrap();
    let body = "mode = \"impulse\"\n[model]\nname = \"linear-test\"\na = [[0.0, 0.0], [0.0, 0.0]]\nc = [5.0, 1.0]\ndiscount = 1.0\n\
                [grid]\nd = 2\nR = 1.0\nh = 0.25\n[numerics]\neps = [0.01]\n[impulse]\ncosts = [[0.0, 1.0], [\"inf\", 0.0]]\n\
                [verify]\ntol = 0.8\nn_samples = 200\n";
    let cfg = config(dir.path(), "imp", body);
    let (code, out, err) = run(&cfg, &[]);
    assert_eq!(code, 0, "{out}{err}");
    let field = read_field(&out_dir(&cfg).join("field.csv")).unwrap();
    for u in field.last().chunks(2) {
        assert!((u[0] - 2.0).abs() < 0.1 && (u[1] - 1.0).abs() < 0.1, "{u:?}");
    }
    assert!(out_dir(&cfg).join("alpha.csv").exists());
}

#[test]
fn stopping_certificate_and_plotdata() {
    let dir = TempDir::new().unwrap();
    let body = "mode = \"stopping\"\n[model]\nname = \"linear-test\"\na = [[1.0]]\nc = [-1.0]\ndiscount = 1.0\n\
                [grid]\nd = 1\nR = 2.0\nh = 0.0625\n[numerics]\neps = { first = 1.0, last = 1e-4 }\n\
                [verify]\ntol = 0.5\nn_samples = 200\n";
    let cfg = with_plotdata(config(dir.path(), "stop", body));
    let (code, out, err) = run(&cfg, &[]);
    assert_eq!(code, 0, "{out}{err}");
    let o = out_dir(&cfg);
    let cert = std::fs::read_to_string(o.join("certificate.dat")).unwrap();
    assert!(cert.starts_with("# eps max_positive_part grad_norm residual\n"));
    assert_eq!(cert.lines().count(), 1 + json(o.join("certificate.json"))["levels"].as_array().unwrap().len());
    let field = std::fs::read_to_string(o.join("field.dat")).unwrap();
    assert!(field.lines().skip(1).all(|l| l.split(' ').count() == 2));
}

#[test]
fn entry_exit_run_gives_two_column_plot() {
    let dir = TempDir::new().unwrap();
    let body = "mode = \"entry-exit\"\n[model]\nname = \"entry-exit\"\nb = 1.0\ns = 3.0\nr = 1.0\n\
                [grid]\nd = 1\nh = 0.0625\n[numerics]\neps = { first = 16.0, last = 1e-3 }\n\
                [verify]\ntol = 0.3\nn_samples = 300\n";
    let cfg = with_plotdata(config(dir.path(), "ee", body));
    let (code, out, err) = run(&cfg, &[]);
    assert_eq!(code, 0, "{out}{err}");
    let o = out_dir(&cfg);
    let plot = std::fs::read_to_string(o.join("field.dat")).unwrap();
    let last = plot.lines().last().unwrap();
    let cols: Vec<f64> = last.split(' ').map(|v| v.parse().unwrap()).collect();
    assert_eq!(cols.len(), 2);
    assert_eq!(cols[0], 6.0);
    assert!((cols[1] - 3.0).abs() < 0.1);
    assert_eq!(json(o.join("certificate.json"))["gradient"]["holds"], true);
}

#[test]
fn characteristics_and_reduce_modes() {
    let dir = TempDir::new().unwrap();
    let body = "mode = \"characteristics\"\n[model]\nname = \"linear-test\"\na = [[0.0]]\nm = [[-1.0]]\nq = [[1.0]]\n\
                [numerics]\ndt = 0.001\nt_f = 1.0\n[characteristics]\npoints = [[0.25], [0.5]]\n";
    let cfg = config(dir.path(), "char", body);
    let (code, _, err) = run(&cfg, &[]);
    assert_eq!(code, 0, "{err}");
    let sol = json(out_dir(&cfg).join("characteristics.json"));
    let v = sol[1]["value"][0].as_f64().unwrap();
    assert!((v - 0.5 * std::f64::consts::E).abs() < 1e-2, "{v}");

    let body = format!(
        "mode = \"reduce\"\n[model]\nname = \"appendix-b\"\n{}[numerics]\ndt = 0.0078125\nt_f = 0.5\n",
        GRID2
    );
    let cfg = config(dir.path(), "red", &body);
    let (code, _, err) = run(&cfg, &[]);
    assert_eq!(code, 0, "{err}");
    let reduced = read_field(&out_dir(&cfg).join("field.csv")).unwrap();
    assert_eq!(reduced.grid().dim(), 1);
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn resolved_config_reproduces_artifacts_at_any_worker_count() {
    let dir = TempDir::new().unwrap();
    let body = format!(
        "mode = \"td\"\n[model]\nname = \"appendix-b\"\n{GRID2}[numerics]\ndt = 0.015625\nt_f = 0.5\n[verify]\ntol = 0.2\nn_samples = 200\n"
    );
    let cfg = config(dir.path(), "det", &body);
    let (code, _, err) = run(&cfg, &["--workers", "1"]);
    assert_eq!(code, 0, "{err}");
    let o = out_dir(&cfg);
    let first = files(&o);
    let resolved = std::fs::read_to_string(o.join("resolved.toml")).unwrap();
    assert!(resolved.contains("seed = 0"), "{resolved}");

    let copy = dir.path().join("again.toml");
    std::fs::write(&copy, &resolved).unwrap();
    let (code, _, err) = run(&copy, &["--workers", "4"]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(first, files(&o));
}

#[test]
fn plotdata_subcommand() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "p", &format!("mode = \"stationary\"\n{LINEAR}{GRID2}"));
    assert_eq!(run(&cfg, &[]).0, 0);
    let field = out_dir(&cfg).join("field.csv");
    let out = dir.path().join("slice.dat");
    let status = bin()
        .args(["plotdata", field.to_str().unwrap(), "--out", out.to_str().unwrap(), "--fix", "2=0", "--component", "1"])
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.lines().skip(1).all(|l| l.split(' ').count() == 2));
    assert_eq!(text.lines().count(), 1 + 9);

    let body = "mode = \"stationary\"\n[model]\nname = \"linear-test\"\na = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]\ndiscount = 1.0\n\
                [grid]\nd = 3\nR = 1.0\nh = 0.25\n";
    let cfg3 = config(dir.path(), "p3", body);
    assert_eq!(run(&cfg3, &[]).0, 0);
    let f3 = out_dir(&cfg3).join("field.csv");
    let code = bin()
        .args(["plotdata", f3.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .status()
        .unwrap()
        .code();
    assert_eq!(code, Some(64));
}
