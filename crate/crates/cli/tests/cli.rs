//! End-to-end checks of the `korteweg` binary and its exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn korteweg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_korteweg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn snapshots(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("snap_"))
        .collect();
    v.sort();
    v
}

/// Column of `diagnostics.csv` as numbers.
fn column(dir: &Path, name: &str) -> Vec<f64> {
    let text = fs::read_to_string(dir.join("diagnostics.csv")).unwrap();
    let mut lines = text.lines();
    let idx = lines.next().unwrap().split(',').position(|c| c == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

fn max_relative_increase(v: &[f64]) -> f64 {
    v.windows(2).map(|w| (w[1] - w[0]) / (1.0 + w[0].abs())).fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn missing_config_is_a_config_error_naming_the_path() {
    let tmp = TempDir::new().unwrap();
    let o = korteweg(tmp.path(), &["run", "--config", "absent.ini"]);
    assert_eq!(code(&o), 64);
    assert!(stderr(&o).contains("absent.ini"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_64() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    for (i, text) in [
        "bogus = 1\n",
        "formulation = skew\n",
        "formulation = regularized\neps = 0.2\nbeta = -1\n",
        "preset = qdd\nbeta = 0\n",
    ]
    .iter()
    .enumerate()
    {
        let cfg = write(d, &format!("c{i}.ini"), text);
        let o = korteweg(d, &["run", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code(&o), 64, "{text}: {}", stderr(&o));
    }
    let cfg = write(d, "ok.ini", "t_end = 0\n");
    let o = korteweg(d, &["run", "--config", cfg.to_str().unwrap(), "--backend", "chebyshev"]);
    assert_eq!(code(&o), 64);
}

#[test]
fn zero_horizon_writes_one_snapshot_and_a_reproducing_echo() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "zero.ini", "[run]\nt_end = 0\npreset = expsin(0.5)\nn = 32\n");
    let o = korteweg(d, &["run", "--config", "zero.ini", "--outdir", "a"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let a = d.join("a");
    assert_eq!(snapshots(&a).len(), 1);
    for f in ["config.ini", "diagnostics.csv", "run.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(meta["termination"], "t_end");

    // the echo alone reproduces the run
    let o = korteweg(d, &["run", "--config", "a/config.ini", "--outdir", "b"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let b = d.join("b");
    assert_eq!(fs::read(a.join("snap_000000.txt")).unwrap(), fs::read(b.join("snap_000000.txt")).unwrap());
    assert_eq!(fs::read(a.join("diagnostics.csv")).unwrap(), fs::read(b.join("diagnostics.csv")).unwrap());
}

#[test]
fn thin_film_preset_has_monotone_entropy() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(
        d,
        "tf.ini",
        "preset = thinfilm\nn = 256\nt_end = 1e-2\nintegrator = semi-implicit\ndt_init = 1e-5\ndt_max = 1e-5\n",
    );
    let o = korteweg(d, &["run", "--config", "tf.ini", "--outdir", "tf", "--quiet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = column(&d.join("tf"), "entropy");
    assert!(s.len() > 100);
    assert!(max_relative_increase(&s) <= 1e-8, "{}", max_relative_increase(&s));
    let m = column(&d.join("tf"), "mass");
    assert!(m.iter().all(|x| (x - m[0]).abs() <= 1e-12 * m[0]));
}

#[test]
fn quadratic_mobility_run_has_monotone_entropy() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(
        d,
        "b1.ini",
        "beta = 1\npreset = cosine(0.5,1)\nn = 128\nt_end = 1e-2\nintegrator = semi-implicit\ndt_init = 1e-5\ndt_max = 1e-5\n",
    );
    let o = korteweg(d, &["run", "--config", "b1.ini", "--outdir", "b1", "--quiet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = column(&d.join("b1"), "entropy");
    assert!(max_relative_increase(&s) <= 1e-8, "{}", max_relative_increase(&s));
}

#[test]
fn datum_with_vacuum_below_minus_two_exits_2() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "v.ini", "beta = -2.5\npreset = cosine(1.5,1)\nn = 16\n");
    let o = korteweg(d, &["run", "--config", "v.ini", "--quiet"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn step_below_dt_min_exits_3() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    // the explicit stability cap at n = 64 sits far below dt_min
    write(d, "u.ini", "n = 64\npreset = cosine(0.3,1)\ndt_min = 1e-9\n");
    let o = korteweg(d, &["run", "--config", "u.ini", "--outdir", "u", "--quiet"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("u/run.json")).unwrap()).unwrap();
    assert_eq!(meta["termination"], "dt_underflow");
}

#[test]
fn identical_config_gives_identical_outputs() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "det.ini", "preset = cosine(0.3,2)\nn = 32\nt_end = 2e-6\nsnapshot_every = 50\n");
    for out in ["x", "y"] {
        let o = korteweg(d, &["run", "--config", "det.ini", "--outdir", out, "--quiet"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let (x, y) = (snapshots(&d.join("x")), snapshots(&d.join("y")));
    assert!(x.len() >= 3);
    assert_eq!(x.len(), y.len());
    for (a, b) in x.iter().zip(&y) {
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }
    assert_eq!(fs::read(d.join("x/diagnostics.csv")).unwrap(), fs::read(d.join("y/diagnostics.csv")).unwrap());
}

#[test]
fn verify_single_exponent_passes() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let o = korteweg(d, &["verify", "--beta", "0", "--outdir", "v"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines: Vec<serde_json::Value> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let names: Vec<&str> = lines.iter().map(|r| r["name"].as_str().unwrap()).collect();
    for want in ["first_variation", "integral_identity", "entropy_flux", "kort", "lemma_a", "four_thirds", "bernis"] {
        assert!(names.contains(&want), "{want} missing from {names:?}");
    }
    for r in &lines {
        assert_eq!(r["passed"], true, "{r}");
        assert_eq!(r["beta"], 0.0);
        for key in ["eps", "n", "max_residual", "constant_estimate", "formula_constant", "worst_case"] {
            assert!(r.get(key).is_some(), "{key}");
        }
    }
    let file: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(d.join("v/verify.json")).unwrap()).unwrap();
    assert_eq!(file, lines);
}

#[test]
fn verify_rejects_excluded_and_empty_lists() {
    let tmp = TempDir::new().unwrap();
    for list in ["-1", "0, -1", "", " , "] {
        let o = korteweg(tmp.path(), &["verify", "--beta", list]);
        assert_eq!(code(&o), 64, "'{list}': {}", stderr(&o));
        assert!(o.stdout.is_empty());
    }
}

#[test]
fn verify_reports_failures_with_exit_1() {
    // n = 64 under-resolves the sharpest bank members
    let tmp = TempDir::new().unwrap();
    let o = korteweg(tmp.path(), &["verify", "--beta", "0", "--n", "64"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("failed"), "{}", stderr(&o));
}

#[test]
fn convergence_rejects_bad_ladders() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    for (i, ladder) in [
        "kind = dt\nladder = 1e-7, 1e-7, 5e-8\n",
        "kind = dt\nladder = 5e-8, 1e-7, 2e-7\n",
        "kind = n\nladder = 16, 32\n",
        "kind = n\nladder = 32, 16, 64\n",
    ]
    .iter()
    .enumerate()
    {
        let cfg = write(d, &format!("l{i}.ini"), &format!("n = 16\nt_end = 1e-6\n[convergence]\n{ladder}"));
        let o = korteweg(d, &["convergence", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code(&o), 64, "{ladder}: {}", stderr(&o));
    }
}

#[test]
fn convergence_table_for_time_ladder() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    // large-amplitude datum so the time error clears round-off
    write(
        d,
        "c.ini",
        "preset = cosine(0.9,3)\nn = 16\nt_end = 5e-5\ncfl4 = 2.0\n[convergence]\nkind = dt\nladder = 1.6e-7, 8e-8, 4e-8\n",
    );
    let o = korteweg(d, &["convergence", "--config", "c.ini", "--outdir", "c", "--quiet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("c/convergence.json")).unwrap()).unwrap();
    assert_eq!(t["kind"], "dt");
    assert_eq!(t["legs"].as_array().unwrap().len(), 3);
    assert_eq!(t["differences"].as_array().unwrap().len(), 2);
    for i in 0..3 {
        assert!(d.join(format!("c/leg_{i}/config.ini")).exists());
        assert_eq!(t["legs"][i]["cap_limited"], false);
    }
    assert!(t["saturated"].as_array().unwrap().iter().all(|s| s == false), "{t}");
    assert!(t["orders"][0].as_f64().unwrap() >= 3.5, "{t}");
}

#[test]
fn spatial_ladder_on_smooth_datum_saturates() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(
        d,
        "s.ini",
        "preset = cosine(0.2,1)\nt_end = 1e-7\ndt_init = 1e-9\ndt_max = 1e-9\ncfl4 = 2.0\n[convergence]\nkind = n\nladder = 16, 32, 64\nscale_dt = true\n",
    );
    let o = korteweg(d, &["convergence", "--config", "s.ini", "--outdir", "s", "--quiet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("s/convergence.json")).unwrap()).unwrap();
    assert_eq!(t["kind"], "n");
    assert_eq!(t["saturated"][1], true, "{t}");
}

#[test]
fn sweep_over_beta_writes_legs_and_combined_csv() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "s.ini", "n = 16\nt_end = 1e-6\n[sweep]\nbeta = -2.5, 0, 1\n");
    let o = korteweg(d, &["sweep", "--config", "s.ini", "--outdir", "s", "--jobs", "2", "--quiet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let legs: Vec<PathBuf> = fs::read_dir(d.join("s"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(legs.len(), 3);
    for l in &legs {
        assert!(l.join("config.ini").exists() && l.join("run.json").exists());
    }
    let csv = fs::read_to_string(d.join("s/sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].contains("int_theta_h2"));
    assert!(rows[1..].iter().all(|r| r.contains(",t_end,")));
}

#[test]
fn sweep_over_eps_has_bounded_columns() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(
        d,
        "e.ini",
        "formulation = regularized\neps = 0.4\nn = 16\nt_end = 2e-6\n[sweep]\neps = 0.4, 0.2, 0.1\n",
    );
    let o = korteweg(d, &["sweep", "--config", "e.ini", "--outdir", "e", "--quiet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(d.join("e/sweep.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    for col in ["sup_power_energy", "sup_rho_max", "int_theta_h2", "int_theta_grad4"] {
        let i = header.iter().position(|h| *h == col).unwrap();
        let v: Vec<f64> = rows.iter().map(|r| r[i].parse().unwrap()).collect();
        assert!(v.iter().all(|x| x.is_finite() && *x >= 0.0), "{col}: {v:?}");
        let (lo, hi) = v.iter().fold((f64::INFINITY, 0.0f64), |(a, b), x| (a.min(*x), b.max(*x)));
        assert!(hi <= 2.0 * lo, "{col} spreads across eps: {v:?}");
    }
}

#[test]
fn sweep_continues_past_failed_legs() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    // beta = -1 is not allowed for the regularized formulation
    write(d, "f.ini", "formulation = regularized\neps = 0.3\nn = 16\nt_end = 1e-6\n[sweep]\nbeta = 0, -1\n");
    let o = korteweg(d, &["sweep", "--config", "f.ini", "--outdir", "f", "--quiet"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let csv = fs::read_to_string(d.join("f/sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].contains(",t_end,"));
    assert!(rows[1].contains(",error,"));
}

#[test]
fn single_point_sweep_matches_run() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "r.ini", "beta = 0.5\nn = 16\nt_end = 1e-6\npreset = cosine(0.2,1)\n");
    write(d, "p.ini", "beta = 0.5\nn = 16\nt_end = 1e-6\npreset = cosine(0.2,1)\nuniform_bounds = true\n[sweep]\nbeta = 0.5\n");
    assert_eq!(code(&korteweg(d, &["run", "--config", "r.ini", "--outdir", "r", "--quiet"])), 0);
    assert_eq!(code(&korteweg(d, &["sweep", "--config", "p.ini", "--outdir", "p", "--quiet"])), 0);
    let leg = fs::read_dir(d.join("p")).unwrap().map(|e| e.unwrap().path()).find(|p| p.is_dir()).unwrap();
    assert_eq!(fs::read(d.join("r/diagnostics.csv")).unwrap(), fs::read(leg.join("diagnostics.csv")).unwrap());
    let (a, b) = (snapshots(&d.join("r")), snapshots(&leg));
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
}
