//! Flat `key = value` configuration with optional section headers.
//!
//! Run keys may sit at the top level or under `[run]`. `[sweep]` and
//! `[convergence]` carry the extra axes for those subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use korteweg::evolution::{Formulation, Integrator, Preset, RunConfig};
use korteweg::{Backend, Error};

type Result<T> = std::result::Result<T, Error>;

const RUN_KEYS: [&str; 23] = [
    "beta",
    "eps",
    "formulation",
    "backend",
    "n",
    "L",
    "t_end",
    "dt_init",
    "dt_min",
    "dt_max",
    "integrator",
    "snapshot_every",
    "outdir",
    "preset",
    "seed",
    "delta",
    "cfl4",
    "safety",
    "lift",
    "dealias",
    "diag_every",
    "weak_residual",
    "uniform_bounds",
];

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("{key} = '{value}': {what}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| bad(key, value, "not a number"))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

/// Comma-separated list of numbers.
pub fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad(key, value, "not a list of numbers")))
        .collect()
}

/// Parsed configuration file.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    pub run: RunConfig,
    pub sweep: Option<SweepAxes>,
    pub convergence: Option<Ladder>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepAxes {
    pub beta: Vec<f64>,
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ladder {
    /// Time steps, strictly decreasing.
    Dt(Vec<f64>),
    /// Grid sizes, strictly increasing; `scale_dt` keeps dt ∝ h⁴.
    N { sizes: Vec<usize>, scale_dt: bool },
}

impl Ladder {
    fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(format!("convergence ladder {m}")));
        match self {
            Ladder::Dt(v) => {
                if v.len() < 3 {
                    return err("needs at least 3 entries");
                }
                if v.windows(2).any(|w| !(w[1] < w[0])) || v.iter().any(|d| !(*d > 0.0)) {
                    return err("dt entries must be positive and strictly decreasing");
                }
            }
            Ladder::N { sizes, .. } => {
                if sizes.len() < 3 {
                    return err("needs at least 3 entries");
                }
                if sizes.windows(2).any(|w| w[1] <= w[0]) {
                    return err("n entries must be strictly increasing");
                }
                if sizes.windows(2).any(|w| w[1] % w[0] != 0) {
                    return err("each n must divide the next so grids nest");
                }
            }
        }
        Ok(())
    }
}

fn apply_run_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    let v = value.trim();
    match key {
        "beta" => cfg.beta = num(key, v)?,
        "eps" => cfg.eps = num(key, v)?,
        "formulation" => cfg.formulation = Formulation::from_str(v)?,
        "backend" => cfg.backend = Backend::from_str(v)?,
        "n" => cfg.n = num(key, v)?,
        "L" => cfg.length = num(key, v)?,
        "t_end" => cfg.t_end = num(key, v)?,
        "dt_init" => cfg.dt_init = num(key, v)?,
        "dt_min" => cfg.dt_min = num(key, v)?,
        "dt_max" => cfg.dt_max = num(key, v)?,
        "integrator" => cfg.integrator = Integrator::from_str(v)?,
        "snapshot_every" => cfg.snapshot_every = num(key, v)?,
        "outdir" => cfg.outdir = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
        "preset" => cfg.preset = Preset::from_str(v)?,
        "seed" => cfg.seed = num(key, v)?,
        "delta" => {
            cfg.delta = if v.eq_ignore_ascii_case("none") || v.is_empty() { None } else { Some(num(key, v)?) }
        }
        "cfl4" => cfg.cfl4 = num(key, v)?,
        "safety" => cfg.safety = num(key, v)?,
        "lift" => cfg.lift = num(key, v)?,
        "dealias" => cfg.dealias = boolean(key, v)?,
        "diag_every" => cfg.diag_every = num(key, v)?,
        "weak_residual" => cfg.weak_residual = boolean(key, v)?,
        "uniform_bounds" => cfg.uniform_bounds = boolean(key, v)?,
        _ => return Err(Error::Config(format!("unknown key '{key}'"))),
    }
    Ok(())
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<ConfigFile> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<ConfigFile> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(format!("malformed config: {e}")))?;
        let mut out = ConfigFile::default();
        let mut beta_seen = false;
        for (section, props) in ini.iter() {
            match section {
                None | Some("run") => {
                    for (k, v) in props.iter() {
                        beta_seen |= k == "beta";
                        apply_run_key(&mut out.run, k, v)?;
                    }
                }
                Some("sweep") => {
                    let mut axes = SweepAxes::default();
                    for (k, v) in props.iter() {
                        match k {
                            "beta" => axes.beta = list(k, v)?,
                            "eps" => axes.eps = list(k, v)?,
                            _ => return Err(Error::Config(format!("unknown sweep key '{k}'"))),
                        }
                    }
                    out.sweep = Some(axes);
                }
                Some("convergence") => {
                    let mut kind = None;
                    let mut ladder_text = None;
                    let mut scale_dt = false;
                    for (k, v) in props.iter() {
                        match k {
                            "kind" => kind = Some(v.trim().to_ascii_lowercase()),
                            "ladder" => ladder_text = Some(v.to_string()),
                            "scale_dt" => scale_dt = boolean(k, v)?,
                            _ => return Err(Error::Config(format!("unknown convergence key '{k}'"))),
                        }
                    }
                    let text = ladder_text.ok_or_else(|| Error::Config("convergence needs 'ladder'".into()))?;
                    let ladder = match kind.as_deref() {
                        Some("dt") => Ladder::Dt(list("ladder", &text)?),
                        Some("n") => Ladder::N { sizes: list("ladder", &text)?, scale_dt },
                        _ => return Err(Error::Config("convergence 'kind' must be dt or n".into())),
                    };
                    ladder.validate()?;
                    out.convergence = Some(ladder);
                }
                Some(other) => return Err(Error::Config(format!("unknown section [{other}]"))),
            }
        }
        if !beta_seen {
            if let Some(b) = out.run.preset.implied_beta() {
                out.run.beta = b;
            }
        }
        Ok(out)
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Resolved run configuration as an ini `[run]` section.
pub fn run_echo(cfg: &RunConfig) -> String {
    let mut s = String::from("[run]\n");
    for key in RUN_KEYS {
        let v = match key {
            "beta" => fmt_f64(cfg.beta),
            "eps" => fmt_f64(cfg.eps),
            "formulation" => cfg.formulation.to_string(),
            "backend" => cfg.backend.to_string(),
            "n" => cfg.n.to_string(),
            "L" => fmt_f64(cfg.length),
            "t_end" => fmt_f64(cfg.t_end),
            "dt_init" => fmt_f64(cfg.dt_init),
            "dt_min" => fmt_f64(cfg.dt_min),
            "dt_max" => fmt_f64(cfg.dt_max),
            "integrator" => cfg.integrator.as_str().to_string(),
            "snapshot_every" => cfg.snapshot_every.to_string(),
            "outdir" => cfg.outdir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "preset" => cfg.preset.to_string(),
            "seed" => cfg.seed.to_string(),
            "delta" => cfg.delta.map(fmt_f64).unwrap_or_else(|| "none".into()),
            "cfl4" => fmt_f64(cfg.cfl4),
            "safety" => fmt_f64(cfg.safety),
            "lift" => fmt_f64(cfg.lift),
            "dealias" => cfg.dealias.to_string(),
            "diag_every" => cfg.diag_every.to_string(),
            "weak_residual" => cfg.weak_residual.to_string(),
            "uniform_bounds" => cfg.uniform_bounds.to_string(),
            _ => unreachable!(),
        };
        let _ = writeln!(s, "{key} = {v}");
    }
    s
}
