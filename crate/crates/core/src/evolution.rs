//! Time stepping for the three formulations.
//!
//! - `Direct`: `∂tρ = -∂x J`, `J = ρ ∂x Λ`, with classical RK4 or a linearly
//!   implicit step that treats `∂²(a ∂² ·)`, `a = ρ κ_ε(ρ)`, implicitly.
//! - `Regularized`: `∂tρ = -∂x(ρu)` with `-δu'' + ρu = ∂x(ρ μ_ε' ∂²φ_ε)`.
//! - `Skew`: `(ρ, Q)` with `Q = √(κ_ε/ρ) ∂xρ`, `κ̃ = √(ρκ_ε)`,
//!   `∂tQ = -∂x(κ̃ ∂x u) - ∂x(uQ)` and
//!   `-δu'' + ρu = ρ (∂x(κ̃ ∂x Q) + ½ ∂x(Q²))`.
//!
//! Every update is in flux form, so the discrete mass changes only by
//! round-off. A node at or below the positivity floor rejects the step; no
//! value is ever clipped.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::coefficients::{raw, Params};
use crate::elliptic::{pcg, solve_velocity, EllipticProblem};
use crate::error::{Error, Result};
use crate::functionals::{
    self, coeff_field, fmt_num, uniform_bound_integrands, DiagRecord, TestBank, UniformBoundIntegrands,
    WeakResidual,
};
use crate::grid::{Backend, Field, Grid};
use crate::identity_lab::first_variation;

/// Damping below this is replaced by the diagonal solve.
pub const DELTA_UNDERFLOW: f64 = 1e-300;
/// Default lift applied to a datum that touches zero.
pub const DEFAULT_LIFT: f64 = 1e-4;
/// Steps between unconditional re-projections of `Q`.
pub const Q_REPROJECT_EVERY: usize = 50;

const MASS_TOL: f64 = 1e-12;
const ENTROPY_TOL: f64 = 1e-8;
const ENERGY_TOL: f64 = 1e-6;
const KHAT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    #[default]
    Direct,
    Regularized,
    Skew,
}

impl Formulation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Formulation::Direct => "direct",
            Formulation::Regularized => "regularized",
            Formulation::Skew => "skew",
        }
    }
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Formulation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "direct" => Ok(Formulation::Direct),
            "regularized" => Ok(Formulation::Regularized),
            "skew" => Ok(Formulation::Skew),
            o => Err(Error::Config(format!("unknown formulation '{o}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    Explicit,
    SemiImplicit,
}

impl Integrator {
    pub fn as_str(&self) -> &'static str {
        match self {
            Integrator::Explicit => "explicit",
            Integrator::SemiImplicit => "semi_implicit",
        }
    }
}

impl FromStr for Integrator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "explicit" | "rk4" => Ok(Integrator::Explicit),
            "semi_implicit" => Ok(Integrator::SemiImplicit),
            o => Err(Error::Config(format!("unknown integrator '{o}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct State {
    pub t: f64,
    pub formulation: Formulation,
    pub rho: Field,
    pub u: Option<Field>,
    pub q: Option<Field>,
}

impl State {
    pub fn direct(rho: Field) -> State {
        State { t: 0.0, formulation: Formulation::Direct, rho, u: None, q: None }
    }

    /// Regularized state with its velocity solved from `rho`.
    pub fn regularized(rho: Field, p: &Params) -> Result<State> {
        let u = regularized_velocity(&rho, p)?;
        Ok(State { t: 0.0, formulation: Formulation::Regularized, rho, u: Some(u), q: None })
    }

    /// Skew state with `Q` projected from `rho`.
    pub fn skew(rho: Field, p: &Params) -> Result<State> {
        let q = project_q(&rho, p)?;
        let u = skew_velocity(&rho, &q, p)?;
        Ok(State { t: 0.0, formulation: Formulation::Skew, rho, u: Some(u), q: Some(q) })
    }

    pub fn new(rho: Field, formulation: Formulation, p: &Params) -> Result<State> {
        match formulation {
            Formulation::Direct => Ok(State::direct(rho)),
            Formulation::Regularized => State::regularized(rho, p),
            Formulation::Skew => State::skew(rho, p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepController {
    pub dt: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub safety: f64,
    /// Explicit fourth-order stability coefficient.
    pub cfl4: f64,
}

impl StepController {
    pub fn new(dt: f64, dt_min: f64, dt_max: f64) -> Result<Self> {
        let c = StepController { dt, dt_min, dt_max, safety: 0.8, cfl4: 0.25 };
        c.validate()?;
        Ok(c)
    }

    pub fn fixed(dt: f64) -> Result<Self> {
        Self::new(dt, dt, dt)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.dt_min > 0.0
            && self.dt_min <= self.dt
            && self.dt <= self.dt_max
            && self.dt_max.is_finite()
            && self.safety > 0.0
            && self.cfl4 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "step controller needs 0 < dt_min <= dt <= dt_max and positive safety, cfl4: {self:?}"
            )))
        }
    }

    /// `safety · cfl4 · h⁴ / (max(ρ κ_ε(ρ)) · c₄)`.
    pub fn explicit_cap(&self, rho: &Field, p: &Params) -> f64 {
        let g = rho.grid();
        let a_max = rho.values().iter().fold(0.0f64, |m, &r| m.max(r * raw::kappa(r, p)));
        self.safety * self.cfl4 * g.h().powi(4) / (a_max * g.c4())
    }
}

/// `J = ρ ∂x(∂x(κ_ε ∂xρ) - κ_ε'/2 |∂xρ|²)`; the update is `∂tρ = -∂x J`.
pub fn flux_direct(rho: &Field, p: &Params) -> Result<Field> {
    let lam = first_variation(rho, p)?;
    Ok(rho * &lam.dx())
}

fn rhs_direct(rho: &Field, p: &Params) -> Result<Field> {
    Ok(-flux_direct(rho, p)?.dx())
}

/// Rejects non-finite values and nodes below the floor.
fn admissible(f: &Field, floor: f64) -> Result<()> {
    if let Some(i) = f.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite value at node {i}")));
    }
    f.check_positive(floor)
}

fn rk4<S: Clone>(
    y: &S,
    dt: f64,
    f: impl Fn(&S) -> Result<S>,
    axpy: impl Fn(&S, f64, &S) -> S,
    check: impl Fn(&S) -> Result<()>,
) -> Result<S> {
    let k1 = f(y)?;
    let y2 = axpy(y, 0.5 * dt, &k1);
    check(&y2)?;
    let k2 = f(&y2)?;
    let y3 = axpy(y, 0.5 * dt, &k2);
    check(&y3)?;
    let k3 = f(&y3)?;
    let y4 = axpy(y, dt, &k3);
    check(&y4)?;
    let k4 = f(&y4)?;
    let incr = axpy(&axpy(&axpy(&k1, 2.0, &k2), 2.0, &k3), 1.0, &k4);
    let out = axpy(y, dt / 6.0, &incr);
    check(&out)?;
    Ok(out)
}

/// One classical RK4 step of the direct formulation.
pub fn step_explicit(state: &State, p: &Params, dt: f64) -> Result<State> {
    let rho = rk4(
        &state.rho,
        dt,
        |r| rhs_direct(r, p),
        |a, c, b| a.axpy(c, b),
        |r| admissible(r, p.floor),
    )?;
    Ok(State { t: state.t + dt, formulation: Formulation::Direct, rho, u: None, q: None })
}

/// One linearly implicit step `(I + dt ∂²(a ∂²)) Δ = -dt ∂x J(ρⁿ)` with
/// `a = ρⁿ κ_ε(ρⁿ)` frozen. The increment is solved in the zero-mean space,
/// so mass is conserved to round-off.
pub fn step_semi_implicit(state: &State, p: &Params, dt: f64) -> Result<State> {
    let rho = &state.rho;
    admissible(rho, p.floor)?;
    let grid = rho.grid().clone();
    let a = rho.map(|r| r * raw::kappa(r, p));
    let a_bar = a.mean();
    let b = rhs_direct(rho, p)?.scale(dt);
    let apply = |d: &Field| d.axpy(dt, &(&a * &d.dxx()).dxx());
    let precond = |r: &Field| {
        Field::from_vec(
            r.grid(),
            grid.apply_multiplier(r.values(), |j| {
                let s = grid.dxx_symbol(j);
                1.0 / (1.0 + dt * a_bar * s * s)
            }),
        )
    };
    // round-off floor of the stiff operator applied to an increment of size |b|
    let s_max = (0..grid.n()).fold(0.0f64, |m, j| m.max(grid.dxx_symbol(j).abs()));
    let floor = 16.0 * f64::EPSILON * (1.0 + dt * a.max_abs() * s_max * s_max) * b.max_abs();
    let tol = (1e-14 * (b.max_abs() + rho.max_abs() * f64::EPSILON)).max(floor);
    let delta = pcg(apply, precond, &b, None, tol, 2000)?;
    let res = (&b - &apply(&delta)).max_abs();
    if !(res <= 1e-10 * (1.0 + b.max_abs()) + 4.0 * floor) {
        return Err(Error::SolverBreakdown(format!("semi-implicit solve residual {res:e}")));
    }
    let mean = delta.mean();
    let new = rho.zip_map(&delta, |r, d| r + (d - mean));
    admissible(&new, p.floor)?;
    Ok(State { t: state.t + dt, formulation: Formulation::Direct, rho: new, u: None, q: None })
}

/// Damping actually used in the velocity solve.
pub fn effective_delta(p: &Params) -> f64 {
    if p.delta_eps < DELTA_UNDERFLOW {
        0.0
    } else {
        p.delta_eps
    }
}

fn velocity(rho: &Field, rhs: Field, p: &Params) -> Result<Field> {
    let prob = EllipticProblem::new(rho.clone(), effective_delta(p), rhs)?;
    Ok(solve_velocity(&prob)?.0)
}

/// `u` from `-δu'' + ρu = ∂x(ρ μ_ε' ∂²φ_ε)`.
pub fn regularized_velocity(rho: &Field, p: &Params) -> Result<Field> {
    let prob = EllipticProblem::from_density(rho.clone(), p)?;
    let prob = EllipticProblem { delta: effective_delta(p), ..prob };
    Ok(solve_velocity(&prob)?.0)
}

fn require_eps(p: &Params, what: &str) -> Result<()> {
    if p.eps > 0.0 {
        Ok(())
    } else {
        Err(Error::Precondition(format!("{what} needs eps > 0")))
    }
}

/// One RK4 step of the regularized system.
pub fn step_regularized(state: &State, p: &Params, dt: f64) -> Result<State> {
    require_eps(p, "the regularized formulation")?;
    let rho = rk4(
        &state.rho,
        dt,
        |r| Ok(-(r * &regularized_velocity(r, p)?).dx()),
        |a, c, b| a.axpy(c, b),
        |r| admissible(r, p.floor),
    )?;
    let u = regularized_velocity(&rho, p)?;
    Ok(State { t: state.t + dt, formulation: Formulation::Regularized, rho, u: Some(u), q: None })
}

/// `Q = √(κ_ε/ρ) ∂xρ`.
pub fn project_q(rho: &Field, p: &Params) -> Result<Field> {
    let g = coeff_field(rho, p, |r, p| (raw::kappa(r, p) / r).sqrt())?;
    Ok(&g * &rho.dx())
}

fn kappa_tilde(rho: &Field, p: &Params) -> Field {
    rho.map(|r| (r * raw::kappa(r, p)).sqrt())
}

/// `u` from `-δu'' + ρu = ρ(∂x(κ̃ ∂xQ) + ½ ∂x(Q²))`.
pub fn skew_velocity(rho: &Field, q: &Field, p: &Params) -> Result<Field> {
    rho.check_positive(p.floor)?;
    let kt = kappa_tilde(rho, p);
    let inner = (&kt * &q.dx()).dx().axpy(0.5, &(q * q).dx());
    velocity(rho, rho * &inner, p)
}

/// `∫∂x(κ̃∂xu) Q` and `∫∂x(κ̃∂xQ) u`; equal for a skew-adjoint `∂x`.
pub fn skew_pairings(rho: &Field, q: &Field, u: &Field, p: &Params) -> (f64, f64) {
    let kt = kappa_tilde(rho, p);
    let a = (&kt * &u.dx()).dx().dot(q);
    let b = (&kt * &q.dx()).dx().dot(u);
    (a, b)
}

/// `|a - b| / (|a| + |b|)`, 0 when both vanish.
pub fn skew_pairing_defect(rho: &Field, q: &Field, u: &Field, p: &Params) -> f64 {
    let (a, b) = skew_pairings(rho, q, u, p);
    let s = a.abs() + b.abs();
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

/// `‖Q - √(κ_ε/ρ)∂xρ‖∞`.
pub fn q_drift(rho: &Field, q: &Field, p: &Params) -> Result<f64> {
    Ok((q - &project_q(rho, p)?).max_abs())
}

#[derive(Clone)]
struct Pair(Field, Field);

/// One RK4 step of the skew system. Returns the new state and the largest
/// skew-pairing defect seen over the stages.
pub fn step_skew(state: &State, p: &Params, dt: f64) -> Result<(State, f64)> {
    require_eps(p, "the skew formulation")?;
    let q0 = match &state.q {
        Some(q) => q.clone(),
        None => project_q(&state.rho, p)?,
    };
    let worst = std::cell::Cell::new(0.0f64);
    let f = |y: &Pair| -> Result<Pair> {
        let Pair(rho, q) = y;
        let u = skew_velocity(rho, q, p)?;
        worst.set(worst.get().max(skew_pairing_defect(rho, q, &u, p)));
        let kt = kappa_tilde(rho, p);
        let drho = -(rho * &u).dx();
        let dq = -((&kt * &u.dx()) + (&u * q)).dx();
        Ok(Pair(drho, dq))
    };
    let out = rk4(
        &Pair(state.rho.clone(), q0),
        dt,
        f,
        |a, c, b| Pair(a.0.axpy(c, &b.0), a.1.axpy(c, &b.1)),
        |y| admissible(&y.0, p.floor),
    )?;
    let Pair(rho, q) = out;
    if !q.all_finite() {
        return Err(Error::Domain("non-finite Q".into()));
    }
    let u = skew_velocity(&rho, &q, p)?;
    Ok((
        State { t: state.t + dt, formulation: Formulation::Skew, rho, u: Some(u), q: Some(q) },
        worst.get(),
    ))
}

/// Initial data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Preset {
    Constant,
    /// `1 + a cos(2πkx/L)`
    Cosine { a: f64, k: u32 },
    /// `exp(a sin(2πx/L))`, unit mean
    Expsin { a: f64 },
    /// `floor + c exp(5(cos(2πx/L) - 1))`, unit mean
    Bump { floor: f64 },
    /// `1 + 0.5 cos(2πx/L)` at β = -1
    Qdd,
    /// `1 + 0.5 cos(2πx/L)` at β = 0
    Thinfilm,
}

impl Default for Preset {
    fn default() -> Self {
        Preset::Cosine { a: 0.25, k: 1 }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Preset::Constant => write!(f, "constant"),
            Preset::Cosine { a, k } => write!(f, "cosine({a},{k})"),
            Preset::Expsin { a } => write!(f, "expsin({a})"),
            Preset::Bump { floor } => write!(f, "bump({floor})"),
            Preset::Qdd => write!(f, "qdd"),
            Preset::Thinfilm => write!(f, "thinfilm"),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let bad = || Error::Config(format!("cannot parse preset '{s}'"));
        let (name, args) = match s.find('(') {
            Some(i) => {
                if !s.ends_with(')') {
                    return Err(bad());
                }
                let inner = &s[i + 1..s.len() - 1];
                let args = inner
                    .split(',')
                    .map(|a| a.trim().parse::<f64>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()?;
                (s[..i].trim().to_string(), args)
            }
            None => (s.clone(), vec![]),
        };
        match (name.as_str(), args.as_slice()) {
            ("constant", []) => Ok(Preset::Constant),
            ("cosine", [a, k]) if *k >= 1.0 && k.fract() == 0.0 => Ok(Preset::Cosine { a: *a, k: *k as u32 }),
            ("expsin", [a]) => Ok(Preset::Expsin { a: *a }),
            ("bump", [floor]) if *floor >= 0.0 && *floor < 1.0 => Ok(Preset::Bump { floor: *floor }),
            ("qdd", []) => Ok(Preset::Qdd),
            ("thinfilm", []) => Ok(Preset::Thinfilm),
            _ => Err(bad()),
        }
    }
}

impl Preset {
    /// Exponent implied by the preset, if any.
    pub fn implied_beta(&self) -> Option<f64> {
        match self {
            Preset::Qdd => Some(-1.0),
            Preset::Thinfilm => Some(0.0),
            _ => None,
        }
    }

    pub fn field(&self, grid: &Arc<Grid>) -> Field {
        let w = 2.0 * std::f64::consts::PI / grid.length();
        let unit_mean = |f: Field| {
            let m = f.mean();
            f.scale(1.0 / m)
        };
        match *self {
            Preset::Constant => Field::constant(grid, 1.0),
            Preset::Cosine { a, k } => Field::from_fn(grid, |x| 1.0 + a * (k as f64 * w * x).cos()),
            Preset::Expsin { a } => unit_mean(Field::from_fn(grid, |x| (a * (w * x).sin()).exp())),
            Preset::Bump { floor } => {
                let b = unit_mean(Field::from_fn(grid, |x| (5.0 * ((w * x).cos() - 1.0)).exp()));
                b.map(|v| floor + (1.0 - floor) * v)
            }
            Preset::Qdd | Preset::Thinfilm => Field::from_fn(grid, |x| 1.0 + 0.5 * (w * x).cos()),
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub beta: f64,
    pub eps: f64,
    pub formulation: Formulation,
    pub backend: Backend,
    pub n: usize,
    #[serde(rename = "L")]
    pub length: f64,
    pub t_end: f64,
    pub dt_init: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub integrator: Integrator,
    /// Accepted steps between snapshots (0: initial and final only).
    pub snapshot_every: usize,
    pub outdir: Option<PathBuf>,
    pub preset: Preset,
    pub seed: u64,
    /// Artificial damping replacing the schedule value.
    pub delta: Option<f64>,
    pub cfl4: f64,
    pub safety: f64,
    /// Lift added to a datum that touches zero (β > -2 only).
    pub lift: f64,
    pub dealias: bool,
    /// Accepted steps between diagnostics rows (at least 1).
    pub diag_every: usize,
    /// Accumulate the weak-form residual over every accepted step.
    pub weak_residual: bool,
    /// Accumulate the ε-uniform bound quantities.
    pub uniform_bounds: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            beta: 0.0,
            eps: 0.0,
            formulation: Formulation::Direct,
            backend: Backend::Spectral,
            n: 64,
            length: 1.0,
            t_end: 1e-5,
            dt_init: 1e-8,
            dt_min: 1e-14,
            dt_max: 1e-8,
            integrator: Integrator::Explicit,
            snapshot_every: 0,
            outdir: None,
            preset: Preset::default(),
            seed: 0,
            delta: None,
            cfl4: 0.25,
            safety: 0.8,
            lift: DEFAULT_LIFT,
            dealias: false,
            diag_every: 1,
            weak_residual: false,
            uniform_bounds: false,
        }
    }
}

impl RunConfig {
    pub fn params(&self) -> Result<Params> {
        let p = Params::new(self.beta, self.eps).map_err(|e| Error::Config(e.to_string()))?;
        match self.delta {
            Some(d) => p.with_delta(d).map_err(|e| Error::Config(e.to_string())),
            None => Ok(p),
        }
    }

    pub fn controller(&self) -> Result<StepController> {
        let mut c = StepController::new(self.dt_init, self.dt_min, self.dt_max)?;
        c.cfl4 = self.cfl4;
        c.safety = self.safety;
        c.validate()?;
        Ok(c)
    }

    pub fn grid(&self) -> Result<Arc<Grid>> {
        let g = Grid::new(self.n, self.length, self.backend).map_err(|e| Error::Config(e.to_string()))?;
        g.with_dealias(self.dealias)
    }

    /// Checks mutual consistency.
    pub fn validate(&self) -> Result<()> {
        let p = self.params()?;
        self.grid()?;
        self.controller()?;
        let cfg = |m: String| Err(Error::Config(m));
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return cfg(format!("t_end must be finite and >= 0, got {}", self.t_end));
        }
        if self.formulation != Formulation::Direct {
            if self.eps <= 0.0 {
                return cfg(format!("{} formulation needs eps > 0", self.formulation));
            }
            if p.excluded.minus_one {
                return cfg("regularized and skew formulations need beta != -1".into());
            }
            if self.integrator != Integrator::Explicit {
                return cfg(format!("{} formulation supports only the explicit integrator", self.formulation));
            }
        }
        if let Some(b) = self.preset.implied_beta() {
            if (b - self.beta).abs() > 1e-12 {
                return cfg(format!("preset {} requires beta = {b}, got {}", self.preset, self.beta));
            }
        }
        if self.uniform_bounds {
            p.require_admissible("the uniform-bound diagnostics")
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.weak_residual && p.excluded.minus_five_thirds {
            return cfg("weak residual needs beta != -5/3".into());
        }
        if !(self.lift > 0.0) {
            return cfg("lift must be positive".into());
        }
        if self.diag_every == 0 {
            return cfg("diag_every must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    TEnd,
    Vacuum,
    DtUnderflow,
    UserAbort,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::TEnd => "t_end",
            Termination::Vacuum => "vacuum",
            Termination::DtUnderflow => "dt_underflow",
            Termination::UserAbort => "user_abort",
        }
    }
}

/// Per-step law checks accumulated over a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Monitors {
    pub mass_initial: f64,
    /// Largest `|M_{n+1} - M_n| / M_0`.
    pub max_mass_step_drift: f64,
    pub mass_violations: usize,
    /// Largest `(S_{n+1} - S_n) / (1 + |S_n|)`; `None` when β is excluded.
    pub max_entropy_increase: Option<f64>,
    pub entropy_violations: usize,
    /// Largest relative increase of `∫|∂ρ^{(β+2)/2}|²` (direct runs).
    pub max_energy_increase: Option<f64>,
    pub energy_violations: usize,
    /// `ε max|ln ρ|` at t = 0 and its running maximum (ε > 0).
    pub khat_initial: Option<f64>,
    pub khat_max: Option<f64>,
    pub khat_violations: usize,
    /// `|E(t) + ∫₀ᵗ(∫ρu² + δ∫|∂u|²) - E(0)|`, maximum over accepted steps.
    pub energy_law_drift: Option<f64>,
    /// `max_t (∫F_ε(ρ(t)) + (1-ε)∫₀ᵗ∫ρμ'|∂²φ|² - ∫F_ε(ρ⁰)) / ε`.
    pub f_law_constant: Option<f64>,
    pub max_skew_pairing: Option<f64>,
    pub q_reprojections: usize,
    pub max_q_drift: Option<f64>,
    /// Largest `|(S_{n+1} - S_n)/dt + D_n|` over accepted steps.
    pub max_entropy_balance: Option<f64>,
}

/// ε-uniform bound quantities: suprema and time integrals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct UniformBounds {
    pub sup_power_energy: f64,
    pub sup_rho_max: f64,
    pub int_theta_h2: f64,
    pub int_theta_grad4: f64,
    /// `ε ∬|∂²ρ^{(2β+3)/4}|²`
    pub eps_int_mid_h2: f64,
    /// `ε ∬|∂ρ^{(2β+3)/8}|⁴`
    pub eps_int_mid_grad4: f64,
    /// `ε³ ∬|∂²ρ^{-1/4}|²`
    pub eps3_int_low_h2: f64,
    /// `ε³ ∬|∂ρ^{-1/8}|⁴`
    pub eps3_int_low_grad4: f64,
}

impl UniformBounds {
    pub const CSV_COLUMNS: [&'static str; 8] = [
        "sup_power_energy",
        "sup_rho_max",
        "int_theta_h2",
        "int_theta_grad4",
        "eps_int_mid_h2",
        "eps_int_mid_grad4",
        "eps3_int_low_h2",
        "eps3_int_low_grad4",
    ];

    pub fn as_array(&self) -> [f64; 8] {
        [
            self.sup_power_energy,
            self.sup_rho_max,
            self.int_theta_h2,
            self.int_theta_grad4,
            self.eps_int_mid_h2,
            self.eps_int_mid_grad4,
            self.eps3_int_low_h2,
            self.eps3_int_low_grad4,
        ]
    }

    fn absorb_sup(&mut self, i: &UniformBoundIntegrands) {
        self.sup_power_energy = self.sup_power_energy.max(i.power_energy);
        self.sup_rho_max = self.sup_rho_max.max(i.rho_max);
    }

    fn absorb_interval(&mut self, a: &UniformBoundIntegrands, b: &UniformBoundIntegrands, dt: f64, eps: f64) {
        let tr = |x: f64, y: f64| 0.5 * dt * (x + y);
        self.int_theta_h2 += tr(a.theta_h2, b.theta_h2);
        self.int_theta_grad4 += tr(a.theta_grad4, b.theta_grad4);
        self.eps_int_mid_h2 += eps * tr(a.mid_h2, b.mid_h2);
        self.eps_int_mid_grad4 += eps * tr(a.mid_grad4, b.mid_grad4);
        let e3 = eps * eps * eps;
        self.eps3_int_low_h2 += e3 * tr(a.low_h2, b.low_h2);
        self.eps3_int_low_grad4 += e3 * tr(a.low_grad4, b.low_grad4);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub termination: Termination,
    pub t_final: f64,
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    /// Lift added to the datum, if it touched zero.
    pub lift_applied: Option<f64>,
    pub delta_used: f64,
    pub delta_artificial: bool,
    pub monitors: Monitors,
    pub uniform_bounds: Option<UniformBounds>,
    pub weak_residual: Option<f64>,
    pub snapshots_written: usize,
    pub message: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Polled once per step; set to stop with `user_abort`.
    pub abort: Option<Arc<AtomicBool>>,
    /// Accepted steps between retained trajectory samples (0: snapshot cadence).
    pub keep_every: usize,
    /// Retain `(t, ρ)` samples in memory.
    pub keep_trajectory: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: State,
    pub records: Vec<DiagRecord>,
    pub summary: RunSummary,
    pub trajectory: Vec<(f64, Field)>,
    pub wall_time_s: f64,
}

/// Cheap per-step law values.
struct StepLaws {
    mass: f64,
    entropy: Option<f64>,
    entropy_dissip: Option<f64>,
    power_energy: Option<f64>,
    khat: Option<f64>,
    energy: Option<f64>,
    dissipation: Option<f64>,
    f_entropy: Option<f64>,
    f_dissip: Option<f64>,
}

fn laws(state: &State, p: &Params, eff_delta: f64, entropy_balance: bool) -> Result<StepLaws> {
    let rho = &state.rho;
    let ok = |r: Result<f64>| r.ok();
    let regular = state.formulation != Formulation::Direct;
    Ok(StepLaws {
        mass: rho.integrate(),
        entropy: ok(functionals::entropy(rho, p)),
        entropy_dissip: if entropy_balance { ok(functionals::entropy_dissipation(rho, p)) } else { None },
        power_energy: if state.formulation == Formulation::Direct {
            ok(functionals::power_energy(rho, p))
        } else {
            None
        },
        khat: if p.eps > 0.0 {
            Some(p.eps * rho.values().iter().fold(0.0f64, |m, r| m.max(r.ln().abs())))
        } else {
            None
        },
        energy: if regular { Some(functionals::korteweg_energy(rho, p)?) } else { None },
        dissipation: match (&state.u, regular) {
            (Some(u), true) => Some(functionals::energy_dissipation(rho, u, eff_delta)),
            _ => None,
        },
        f_entropy: if regular { ok(functionals::f_entropy(rho, p)) } else { None },
        f_dissip: if regular { ok(functionals::f_dissipation(rho, p)) } else { None },
    })
}

fn max_opt(a: Option<f64>, b: f64) -> Option<f64> {
    Some(a.map_or(b, |a| a.max(b)))
}

/// Snapshot text: `# key=value` headers, then rows `x rho [u q]`.
pub fn write_snapshot(path: &Path, state: &State, p: &Params) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let grid = state.rho.grid();
    let mut cols = vec!["x", "rho"];
    if state.u.is_some() {
        cols.push("u");
    }
    if state.q.is_some() {
        cols.push("q");
    }
    let mut body = || -> std::io::Result<()> {
        writeln!(w, "# beta={}", p.beta)?;
        writeln!(w, "# eps={}", p.eps)?;
        writeln!(w, "# n={}", grid.n())?;
        writeln!(w, "# L={}", grid.length())?;
        writeln!(w, "# t={}", fmt_num(state.t))?;
        writeln!(w, "# formulation={}", state.formulation)?;
        writeln!(w, "# columns={}", cols.join(" "))?;
        for (i, x) in grid.nodes().iter().enumerate() {
            write!(w, "{} {}", fmt_num(*x), fmt_num(state.rho.values()[i]))?;
            if let Some(u) = &state.u {
                write!(w, " {}", fmt_num(u.values()[i]))?;
            }
            if let Some(q) = &state.q {
                write!(w, " {}", fmt_num(q.values()[i]))?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    body().map_err(|e| Error::io(path, e))
}

/// Runs from the configured preset.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    run_from(cfg, cfg.preset.field(&grid), opts)
}

/// Runs from an explicit datum on the configured grid.
pub fn run_from(cfg: &RunConfig, rho0: Field, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let p = cfg.params()?;
    let mut ctrl = cfg.controller()?;

    let mut lift_applied = None;
    let rho0 = if rho0.min() <= 0.0 {
        if p.beta > -2.0 {
            lift_applied = Some(cfg.lift);
            log::info!("datum touches zero; lifted by {}", cfg.lift);
            rho0.map(|v| v + cfg.lift)
        } else {
            return Err(Error::Vacuum {
                index: rho0.values().iter().position(|v| *v <= 0.0).unwrap_or(0),
                value: rho0.min(),
            });
        }
    } else {
        rho0
    };
    admissible(&rho0, p.floor)?;

    let eff_delta = effective_delta(&p);
    if cfg.formulation != Formulation::Direct && eff_delta == 0.0 && p.delta_eps > 0.0 {
        log::info!("damping {:e} underflows; using the diagonal velocity solve", p.delta_eps);
    }

    if let Some(dir) = &cfg.outdir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut state = State::new(rho0, cfg.formulation, &p)?;
    let keep = opts.keep_trajectory;
    let mut weak = if cfg.weak_residual {
        let mut w = WeakResidual::new(state.rho.grid(), &p, &TestBank::default(), state.t, cfg.t_end - state.t)?;
        w.push(state.t, &state.rho)?;
        Some(w)
    } else {
        None
    };
    let keep_every = if opts.keep_every > 0 { opts.keep_every } else { cfg.snapshot_every };
    let mut trajectory = Vec::new();
    if keep {
        trajectory.push((state.t, state.rho.clone()));
    }

    let mut records = vec![DiagRecord::evaluate(state.t, &state.rho, state.u.as_ref(), &p)?];
    let mut snapshots_written = 0usize;
    let snap = |state: &State, count: &mut usize| -> Result<()> {
        if let Some(dir) = &cfg.outdir {
            write_snapshot(&dir.join(format!("snap_{:06}.txt", *count)), state, &p)?;
            *count += 1;
        }
        Ok(())
    };
    snap(&state, &mut snapshots_written)?;

    let balance = cfg.formulation == Formulation::Direct && cfg.integrator == Integrator::Explicit;
    let mut prev = laws(&state, &p, eff_delta, balance)?;
    let e0 = prev.energy;
    let f0 = prev.f_entropy;
    let mut monitors = Monitors {
        mass_initial: prev.mass,
        khat_initial: prev.khat,
        khat_max: prev.khat,
        ..Default::default()
    };
    if p.excluded.any() {
        monitors.max_entropy_increase = None;
    }
    let mut dissipated = 0.0;
    let mut f_dissipated = 0.0;
    let mut ub_prev = if cfg.uniform_bounds { Some(uniform_bound_integrands(&state.rho, &p)?) } else { None };
    let mut ub = ub_prev.map(|i| {
        let mut u = UniformBounds::default();
        u.absorb_sup(&i);
        u
    });

    let mut steps = 0usize;
    let mut rejected = 0usize;
    let mut message = None;
    let mut last_failure_vacuum = false;
    // Kahan compensation for the accumulated time
    let mut t_comp = 0.0f64;
    let termination = loop {
        let remaining = cfg.t_end - state.t;
        if remaining <= 1e-14 * cfg.t_end.max(f64::MIN_POSITIVE) || remaining <= 0.0 {
            break Termination::TEnd;
        }
        if let Some(flag) = &opts.abort {
            if flag.load(Ordering::Relaxed) {
                break Termination::UserAbort;
            }
        }
        let mut dt = ctrl.dt.min(ctrl.dt_max);
        if cfg.integrator == Integrator::Explicit {
            dt = dt.min(ctrl.explicit_cap(&state.rho, &p));
        }
        // absorb round-off in the accumulated time into the final step
        let last = dt * (1.0 + 1e-6) >= remaining;
        if last {
            dt = remaining;
        } else if dt < ctrl.dt_min {
            message = Some(format!("step {dt:e} below dt_min {:e} at t = {:e}", ctrl.dt_min, state.t));
            break if last_failure_vacuum { Termination::Vacuum } else { Termination::DtUnderflow };
        }

        let attempt = match cfg.formulation {
            Formulation::Direct => match cfg.integrator {
                Integrator::Explicit => step_explicit(&state, &p, dt).map(|s| (s, None)),
                Integrator::SemiImplicit => step_semi_implicit(&state, &p, dt).map(|s| (s, None)),
            },
            Formulation::Regularized => step_regularized(&state, &p, dt).map(|s| (s, None)),
            Formulation::Skew => step_skew(&state, &p, dt).map(|(s, w)| (s, Some(w))),
        };
        let (mut next, pairing) = match attempt {
            Ok(v) => v,
            Err(e) => {
                last_failure_vacuum = matches!(e, Error::Vacuum { .. });
                if !matches!(e, Error::Vacuum { .. } | Error::Domain(_) | Error::SolverBreakdown(_)) {
                    return Err(e);
                }
                rejected += 1;
                log::debug!("step rejected at t = {:e}, dt = {dt:e}: {e}", state.t);
                ctrl.dt = dt * 0.5;
                if ctrl.dt < ctrl.dt_min {
                    message = Some(format!("{e}"));
                    break if last_failure_vacuum { Termination::Vacuum } else { Termination::DtUnderflow };
                }
                continue;
            }
        };
        if last {
            next.t = cfg.t_end;
        } else {
            let y = dt - t_comp;
            next.t = state.t + y;
            t_comp = (next.t - state.t) - y;
        }
        steps += 1;
        last_failure_vacuum = false;
        ctrl.dt = (2.0 * ctrl.dt).min(ctrl.dt_max).max(ctrl.dt_min);

        if let Some(w) = pairing {
            monitors.max_skew_pairing = max_opt(monitors.max_skew_pairing, w);
        }
        if cfg.formulation == Formulation::Skew {
            let q = next.q.as_ref().expect("skew state carries q");
            let drift = q_drift(&next.rho, q, &p)?;
            monitors.max_q_drift = max_opt(monitors.max_q_drift, drift);
            if drift > 1e-6 * (1.0 + q.max_abs()) || steps % Q_REPROJECT_EVERY == 0 {
                if drift > 1e-6 * (1.0 + q.max_abs()) {
                    log::info!("Q drift {drift:e} at t = {:e}; re-projecting", next.t);
                }
                let qn = project_q(&next.rho, &p)?;
                next.u = Some(skew_velocity(&next.rho, &qn, &p)?);
                next.q = Some(qn);
                monitors.q_reprojections += 1;
            }
        }

        let cur = laws(&next, &p, eff_delta, balance)?;
        let dm = (cur.mass - prev.mass).abs() / monitors.mass_initial;
        monitors.max_mass_step_drift = monitors.max_mass_step_drift.max(dm);
        if dm > MASS_TOL {
            monitors.mass_violations += 1;
        }
        if let (Some(s0), Some(s1)) = (prev.entropy, cur.entropy) {
            let inc = (s1 - s0) / (1.0 + s0.abs());
            monitors.max_entropy_increase = max_opt(monitors.max_entropy_increase, inc);
            if inc > ENTROPY_TOL {
                monitors.entropy_violations += 1;
            }
            if let Some(d0) = prev.entropy_dissip {
                let b = ((s1 - s0) / dt + d0).abs();
                monitors.max_entropy_balance = max_opt(monitors.max_entropy_balance, b);
            }
        }
        if let (Some(e0), Some(e1)) = (prev.power_energy, cur.power_energy) {
            let inc = (e1 - e0) / e0.abs().max(f64::MIN_POSITIVE);
            monitors.max_energy_increase = max_opt(monitors.max_energy_increase, inc);
            if e1 - e0 > ENERGY_TOL * e0.abs() {
                monitors.energy_violations += 1;
            }
        }
        if let (Some(k), Some(k0)) = (cur.khat, monitors.khat_initial) {
            monitors.khat_max = max_opt(monitors.khat_max, k);
            if k > k0 * (1.0 + KHAT_TOL) + KHAT_TOL {
                monitors.khat_violations += 1;
            }
        }
        if let (Some(d0), Some(d1), Some(e_init), Some(e)) = (prev.dissipation, cur.dissipation, e0, cur.energy) {
            dissipated += 0.5 * dt * (d0 + d1);
            let drift = (e + dissipated - e_init).abs();
            monitors.energy_law_drift = max_opt(monitors.energy_law_drift, drift);
        }
        if let (Some(a), Some(b), Some(f_init), Some(f)) = (prev.f_dissip, cur.f_dissip, f0, cur.f_entropy) {
            f_dissipated += 0.5 * dt * (a + b);
            let c = (f + (1.0 - p.eps) * f_dissipated - f_init) / p.eps;
            monitors.f_law_constant = max_opt(monitors.f_law_constant, c);
        }
        if let (Some(acc), Some(a)) = (ub.as_mut(), ub_prev.as_ref()) {
            let b = uniform_bound_integrands(&next.rho, &p)?;
            acc.absorb_sup(&b);
            acc.absorb_interval(a, &b, dt, p.eps);
            ub_prev = Some(b);
        }
        prev = cur;
        state = next;

        let at_end = cfg.t_end - state.t <= 1e-14 * cfg.t_end;
        if steps % cfg.diag_every == 0 || at_end {
            records.push(DiagRecord::evaluate(state.t, &state.rho, state.u.as_ref(), &p)?);
        }
        if cfg.snapshot_every > 0 && steps % cfg.snapshot_every == 0 && !at_end {
            snap(&state, &mut snapshots_written)?;
        }
        if let Some(w) = weak.as_mut() {
            w.push(state.t, &state.rho)?;
        }
        if keep && ((keep_every > 0 && steps % keep_every == 0) || at_end) {
            trajectory.push((state.t, state.rho.clone()));
        }
    };

    if records.last().map(|r| r.t) != Some(state.t) {
        records.push(DiagRecord::evaluate(state.t, &state.rho, state.u.as_ref(), &p)?);
    }
    if steps > 0 || cfg.t_end > 0.0 {
        if !(cfg.snapshot_every == 0 && steps == 0) {
            snap(&state, &mut snapshots_written)?;
        }
    }
    if keep && trajectory.last().map(|s| s.0) != Some(state.t) {
        trajectory.push((state.t, state.rho.clone()));
    }

    // only meaningful when the run reached the horizon the bank was scaled to
    let weak = match weak {
        Some(acc) if termination == Termination::TEnd && acc.samples() >= 3 => Some(acc.finish()?),
        _ => None,
    };
    if let (Some(w), Some(last)) = (weak, records.last_mut()) {
        last.weak_residual = w;
    }

    let summary = RunSummary {
        termination,
        t_final: state.t,
        steps_accepted: steps,
        steps_rejected: rejected,
        lift_applied,
        delta_used: if cfg.formulation == Formulation::Direct { 0.0 } else { eff_delta },
        delta_artificial: p.delta_artificial,
        monitors,
        uniform_bounds: ub,
        weak_residual: weak,
        snapshots_written,
        message,
    };
    let wall_time_s = started.elapsed().as_secs_f64();

    if let Some(dir) = &cfg.outdir {
        write_outputs(dir, cfg, &records, &summary, wall_time_s)?;
    }
    Ok(RunOutcome { state, records, summary, trajectory: if keep { trajectory } else { vec![] }, wall_time_s })
}

#[derive(Serialize)]
struct RunMeta<'a> {
    config: &'a RunConfig,
    termination: &'a str,
    wall_time_s: f64,
    steps_accepted: usize,
    steps_rejected: usize,
    summary: &'a RunSummary,
}

fn write_outputs(
    dir: &Path,
    cfg: &RunConfig,
    records: &[DiagRecord],
    summary: &RunSummary,
    wall_time_s: f64,
) -> Result<()> {
    let csv = dir.join("diagnostics.csv");
    let f = fs::File::create(&csv).map_err(|e| Error::io(&csv, e))?;
    let mut w = BufWriter::new(f);
    functionals::write_csv(records, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&csv, e))?;
    let meta = RunMeta {
        config: cfg,
        termination: summary.termination.as_str(),
        wall_time_s,
        steps_accepted: summary.steps_accepted,
        steps_rejected: summary.steps_rejected,
        summary,
    };
    let path = dir.join("run.json");
    let text = serde_json::to_string_pretty(&meta).expect("run metadata serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}
