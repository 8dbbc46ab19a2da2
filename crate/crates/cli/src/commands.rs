use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};

use korteweg::evolution::{self, RunConfig, RunOptions, RunOutcome, Termination, UniformBounds};
use korteweg::identity_lab::{lab_grid, verify_beta, IdentityReport, TrialBank, BETA_GRID};
use korteweg::{Backend, Error, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{self, ConfigFile, Ladder, SweepAxes};
use crate::{exit, Cli, Command, Global};

/// Relative difference below which refinement is reported as saturated.
const SATURATION: f64 = 1e-11;

const DEFAULT_OUTDIR: &str = "out";

pub fn dispatch(cli: &Cli) -> Result<u8> {
    let g = &cli.global;
    match &cli.command {
        Command::Run => cmd_run(g),
        Command::Verify { beta, n, seed, eps } => cmd_verify(g, beta.as_deref(), *n, *seed, *eps),
        Command::Convergence => cmd_convergence(g),
        Command::Sweep => cmd_sweep(g),
    }
}

fn abort_flag() -> Arc<AtomicBool> {
    static FLAG: OnceLock<Arc<AtomicBool>> = OnceLock::new();
    FLAG.get_or_init(|| {
        let flag = Arc::new(AtomicBool::new(false));
        let f = flag.clone();
        if let Err(e) = ctrlc::set_handler(move || f.store(true, Ordering::Relaxed)) {
            log::warn!("no interrupt handler: {e}");
        }
        flag
    })
    .clone()
}

fn run_options() -> RunOptions {
    RunOptions { abort: Some(abort_flag()), ..Default::default() }
}

fn termination_code(t: Termination) -> u8 {
    match t {
        Termination::TEnd => exit::OK,
        Termination::Vacuum => exit::VACUUM,
        Termination::DtUnderflow => exit::DT_UNDERFLOW,
        Termination::UserAbort => exit::USER_ABORT,
    }
}

/// Loads the config file and applies the command-line overrides.
fn load(g: &Global) -> Result<ConfigFile> {
    let path = g.config.as_ref().ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let mut c = ConfigFile::load(path)?;
    if let Some(b) = &g.backend {
        c.run.backend = Backend::from_str(b)?;
    }
    if let Some(d) = &g.outdir {
        c.run.outdir = Some(d.clone());
    }
    if c.run.outdir.is_none() {
        c.run.outdir = Some(PathBuf::from(DEFAULT_OUTDIR));
    }
    Ok(c)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io(path, e))
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}

/// Validates, echoes the configuration into its outdir, then integrates.
fn run_leg(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = cfg.outdir.as_ref().expect("outdir resolved before running");
    write_text(&dir.join("config.ini"), &config::run_echo(cfg))?;
    evolution::run(cfg, &run_options())
}

fn report_run(g: &Global, out: &RunOutcome) {
    let s = &out.summary;
    if !g.quiet {
        eprintln!(
            "{}: t = {:e}, {} steps ({} rejected), {} snapshots",
            s.termination.as_str(),
            s.t_final,
            s.steps_accepted,
            s.steps_rejected,
            s.snapshots_written
        );
    }
    if let Some(m) = &s.message {
        log::warn!("{m}");
    }
}

fn cmd_run(g: &Global) -> Result<u8> {
    let cfg = load(g)?.run;
    let out = run_leg(&cfg)?;
    report_run(g, &out);
    Ok(termination_code(out.summary.termination))
}

fn cmd_verify(g: &Global, beta: Option<&str>, n: usize, seed: u64, eps: f64) -> Result<u8> {
    let betas: Vec<f64> = match beta {
        Some(text) => config::list("beta", text)?,
        None => BETA_GRID.to_vec(),
    };
    if betas.is_empty() {
        return Err(Error::Config("empty beta list".into()));
    }
    let mut grid = lab_grid(n).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(b) = &g.backend {
        let backend = Backend::from_str(b)?;
        if backend != grid.backend() {
            grid = korteweg::Grid::new(n, 1.0, backend)?.with_chop(grid.chop())?;
        }
    }
    let bank = TrialBank::standard(&grid, seed);
    // reject excluded exponents before doing any work
    for &b in &betas {
        korteweg::Params::admissible(b, eps)?;
    }
    let mut reports: Vec<IdentityReport> = Vec::new();
    for &b in &betas {
        reports.extend(verify_beta(&bank, b, eps)?);
    }
    let mut stdout = String::new();
    for r in &reports {
        let _ = writeln!(stdout, "{}", serde_json::to_string(r).expect("report serializes"));
    }
    print!("{stdout}");
    if let Some(dir) = &g.outdir {
        write_text(&dir.join("verify.json"), &to_json(&reports))?;
    }
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} (beta = {}, max_residual = {:e})", r.name, r.beta, r.max_residual))
        .collect();
    if failed.is_empty() {
        if !g.quiet {
            eprintln!("all {} reports passed", reports.len());
        }
        Ok(exit::OK)
    } else {
        eprintln!("{} of {} reports failed:", failed.len(), reports.len());
        for f in &failed {
            eprintln!("  {f}");
        }
        Ok(exit::FAILED)
    }
}

#[derive(Debug, Serialize)]
struct LegResult {
    value: f64,
    outdir: PathBuf,
    termination: Option<&'static str>,
    steps_accepted: usize,
    /// More steps were taken than the nominal `t_end / dt`: the stability
    /// cap shortened the requested step.
    cap_limited: bool,
    weak_residual: Option<f64>,
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct ConvergenceTable {
    kind: &'static str,
    ladder: Vec<f64>,
    legs: Vec<LegResult>,
    /// L² distance between successive terminal densities, on the coarsest nodes.
    differences: Vec<f64>,
    saturated: Vec<bool>,
    /// Richardson order from each pair of successive differences.
    orders: Vec<Option<f64>>,
    weak_residual_orders: Vec<Option<f64>>,
}

fn ladder_echo(l: &Ladder) -> String {
    let join = |v: Vec<String>| v.join(", ");
    match l {
        Ladder::Dt(v) => {
            format!("[convergence]\nkind = dt\nladder = {}\n", join(v.iter().map(|d| format!("{d:?}")).collect()))
        }
        Ladder::N { sizes, scale_dt } => format!(
            "[convergence]\nkind = n\nladder = {}\nscale_dt = {scale_dt}\n",
            join(sizes.iter().map(|n| n.to_string()).collect())
        ),
    }
}

/// L² distance after sampling both fields on the coarser grid's nodes.
fn coarse_l2(a: &[f64], b: &[f64], length: f64) -> f64 {
    let (a, b) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let stride = b.len() / a.len();
    let h = length / a.len() as f64;
    let s: f64 = a.iter().enumerate().map(|(i, v)| (v - b[i * stride]).powi(2)).sum();
    (s * h).sqrt()
}

fn cmd_convergence(g: &Global) -> Result<u8> {
    let c = load(g)?;
    let ladder = c.convergence.clone().ok_or_else(|| Error::Config("missing [convergence] section".into()))?;
    let base = c.run.clone();
    let root = base.outdir.clone().expect("outdir resolved");
    let (kind, values, ratios): (&'static str, Vec<f64>, Vec<f64>) = match &ladder {
        Ladder::Dt(v) => ("dt", v.clone(), v.windows(2).map(|w| w[0] / w[1]).collect()),
        Ladder::N { sizes, .. } => (
            "n",
            sizes.iter().map(|&n| n as f64).collect(),
            sizes.windows(2).map(|w| w[1] as f64 / w[0] as f64).collect(),
        ),
    };
    let legs: Vec<RunConfig> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut cfg = base.clone();
            match &ladder {
                Ladder::Dt(_) => {
                    cfg.dt_init = v;
                    cfg.dt_max = v;
                }
                Ladder::N { sizes, scale_dt } => {
                    cfg.n = sizes[i];
                    if *scale_dt {
                        let s = (sizes[0] as f64 / sizes[i] as f64).powi(4);
                        cfg.dt_init *= s;
                        cfg.dt_max *= s;
                        cfg.dt_min = cfg.dt_min.min(cfg.dt_init);
                    }
                }
            }
            cfg.outdir = Some(root.join(format!("leg_{i}")));
            cfg
        })
        .collect();
    for cfg in &legs {
        cfg.validate()?;
    }
    write_text(&root.join("config.ini"), &(config::run_echo(&base) + &ladder_echo(&ladder)))?;

    let mut results = Vec::new();
    let mut finals = Vec::new();
    let mut code = exit::OK;
    for (cfg, &value) in legs.iter().zip(&values) {
        let outdir = cfg.outdir.clone().expect("set above");
        match run_leg(cfg) {
            Ok(out) => {
                report_run(g, &out);
                let t = out.summary.termination;
                if t != Termination::TEnd {
                    code = exit::FAILED;
                }
                let nominal = (cfg.t_end / cfg.dt_max).ceil() as usize;
                results.push(LegResult {
                    value,
                    outdir,
                    termination: Some(t.as_str()),
                    steps_accepted: out.summary.steps_accepted,
                    cap_limited: out.summary.steps_accepted > nominal,
                    weak_residual: out.summary.weak_residual,
                    error: None,
                });
                finals.push(Some(out.state.rho.values().to_vec()));
            }
            Err(e) => {
                log::error!("leg {value}: {e}");
                code = exit::FAILED;
                results.push(LegResult {
                    value,
                    outdir,
                    termination: None,
                    steps_accepted: 0,
                    cap_limited: false,
                    weak_residual: None,
                    error: Some(e.to_string()),
                });
                finals.push(None);
            }
        }
    }

    if results.iter().any(|r| r.cap_limited) {
        log::warn!("the stability cap overrode the requested step on some legs; their differences do not measure the ladder");
    }
    let scale = finals
        .iter()
        .flatten()
        .map(|r| r.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let differences: Vec<f64> = finals
        .windows(2)
        .map(|w| match (&w[0], &w[1]) {
            (Some(a), Some(b)) => coarse_l2(a, b, base.length),
            _ => f64::NAN,
        })
        .collect();
    let saturated: Vec<bool> = differences.iter().map(|d| *d <= SATURATION * scale).collect();
    let order = |e0: f64, e1: f64, r: f64| {
        let o = (e0 / e1).ln() / r.ln();
        o.is_finite().then_some(o)
    };
    let orders = (0..differences.len().saturating_sub(1))
        .map(|i| {
            if saturated[i] || saturated[i + 1] {
                None
            } else {
                order(differences[i], differences[i + 1], (ratios[i] * ratios[i + 1]).sqrt())
            }
        })
        .collect();
    let weak_residual_orders = results
        .windows(2)
        .zip(&ratios)
        .map(|(w, &r)| match (w[0].weak_residual, w[1].weak_residual) {
            (Some(a), Some(b)) => order(a, b, r),
            _ => None,
        })
        .collect();
    let table = ConvergenceTable {
        kind,
        ladder: values,
        legs: results,
        differences,
        saturated,
        orders,
        weak_residual_orders,
    };
    let text = to_json(&table);
    write_text(&root.join("convergence.json"), &text)?;
    print!("{text}");
    Ok(code)
}

fn sweep_echo(a: &SweepAxes) -> String {
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ");
    let mut s = String::from("[sweep]\n");
    if !a.beta.is_empty() {
        let _ = writeln!(s, "beta = {}", join(&a.beta));
    }
    if !a.eps.is_empty() {
        let _ = writeln!(s, "eps = {}", join(&a.eps));
    }
    s
}

fn cmd_sweep(g: &Global) -> Result<u8> {
    let c = load(g)?;
    let axes = c.sweep.clone().ok_or_else(|| Error::Config("missing [sweep] section".into()))?;
    let base = c.run.clone();
    let root = base.outdir.clone().expect("outdir resolved");
    let betas = if axes.beta.is_empty() { vec![base.beta] } else { axes.beta.clone() };
    let epss = if axes.eps.is_empty() { vec![base.eps] } else { axes.eps.clone() };
    let legs: Vec<RunConfig> = betas
        .iter()
        .flat_map(|&b| epss.iter().map(move |&e| (b, e)))
        .enumerate()
        .map(|(i, (b, e))| {
            let mut cfg = base.clone();
            cfg.beta = b;
            cfg.eps = e;
            cfg.uniform_bounds = true;
            cfg.outdir = Some(root.join(format!("leg_{i:03}_beta{b}_eps{e}")));
            cfg
        })
        .collect();
    write_text(&root.join("config.ini"), &(config::run_echo(&base) + &sweep_echo(&axes)))?;

    let jobs = g.jobs.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot build a pool of {jobs} workers: {e}")))?;
    let outcomes: Vec<Result<RunOutcome>> = pool.install(|| legs.par_iter().map(run_leg).collect());

    let mut csv = String::from("leg,beta,eps,outdir,termination,t_final,steps_accepted,steps_rejected");
    for col in UniformBounds::CSV_COLUMNS {
        let _ = write!(csv, ",{col}");
    }
    csv.push_str(",error\n");
    let mut failed = 0usize;
    for (i, (cfg, out)) in legs.iter().zip(&outcomes).enumerate() {
        let dir = cfg.outdir.as_ref().expect("set above").display().to_string();
        let _ = write!(csv, "{i},{:?},{:?},{dir}", cfg.beta, cfg.eps);
        match out {
            Ok(out) => {
                let s = &out.summary;
                if s.termination != Termination::TEnd {
                    failed += 1;
                }
                report_run(g, out);
                let _ = write!(
                    csv,
                    ",{},{:.16e},{},{}",
                    s.termination.as_str(),
                    s.t_final,
                    s.steps_accepted,
                    s.steps_rejected
                );
                let bounds = s.uniform_bounds.map(|u| u.as_array()).unwrap_or([f64::NAN; 8]);
                for v in bounds {
                    let _ = write!(csv, ",{v:.16e}");
                }
                csv.push_str(",\n");
            }
            Err(e) => {
                failed += 1;
                log::error!("leg {i} (beta = {}, eps = {}): {e}", cfg.beta, cfg.eps);
                let _ = write!(csv, ",error,NaN,0,0");
                for _ in 0..8 {
                    csv.push_str(",NaN");
                }
                let _ = writeln!(csv, ",\"{}\"", e.to_string().replace('"', "'"));
            }
        }
    }
    write_text(&root.join("sweep.csv"), &csv)?;
    if failed > 0 {
        eprintln!("{failed} of {} sweep legs failed", legs.len());
        Ok(exit::FAILED)
    } else {
        Ok(exit::OK)
    }
}
