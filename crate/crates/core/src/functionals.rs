//! Integral quantities tracked along solutions.
//!
//! Entropy sign: for β ∈ (-3, -1) the prefactor `4/((β+3)(β+1))` is negative.
//! The signed value is stored and is the quantity that decreases in time.

use std::f64::consts::PI;
use std::io::Write;

use serde::Serialize;

use crate::coefficients::{raw, Params};
use crate::error::{Error, Result};
use std::sync::Arc;

use crate::grid::{Field, Grid};

/// Pointwise coefficient field after a positivity check against `p.floor`.
pub(crate) fn coeff_field(rho: &Field, p: &Params, f: impl Fn(f64, &Params) -> f64) -> Result<Field> {
    rho.check_positive(p.floor)?;
    Ok(rho.map(|r| f(r, p)))
}

pub(crate) fn pow_field(rho: &Field, e: f64) -> Field {
    rho.map(|r| (e * r.ln()).exp())
}

pub fn mass(rho: &Field) -> Result<f64> {
    rho.check_positive(0.0)?;
    Ok(rho.integrate())
}

/// `∫ κ_ε(ρ) |∂ρ|² / 2`.
pub fn korteweg_energy(rho: &Field, p: &Params) -> Result<f64> {
    let k = coeff_field(rho, p, raw::kappa)?;
    let d = rho.dx();
    Ok(0.5 * (&k * &(&d * &d)).integrate())
}

/// `∫ |∂ρ^{(β+2)/2}|²`; the log case β = -2 is rejected.
pub fn power_energy(rho: &Field, p: &Params) -> Result<f64> {
    p.require_not(-2.0, "the power energy")?;
    rho.check_positive(p.floor)?;
    Ok(grad_sq(&pow_field(rho, (p.beta + 2.0) / 2.0)))
}

fn grad_sq(g: &Field) -> f64 {
    let d = g.dx();
    (&d * &d).integrate()
}

fn grad4(g: &Field) -> f64 {
    g.dx().map(|v| v.powi(4)).integrate()
}

fn h2(g: &Field) -> f64 {
    let d = g.dxx();
    (&d * &d).integrate()
}

/// Signed zero-order entropy `∫ 4ρ^{(β+3)/2} / ((β+3)(β+1))`.
pub fn entropy(rho: &Field, p: &Params) -> Result<f64> {
    p.require_not(-1.0, "the entropy")?;
    rho.check_positive(p.floor)?;
    let b = p.beta;
    Ok(4.0 / ((b + 3.0) * (b + 1.0)) * pow_field(rho, (b + 3.0) / 2.0).integrate())
}

/// `4/(β+1)² ∫ ρ^{(β+3)/2} |∂²ρ^{(β+1)/2}|²`.
pub fn entropy_dissipation(rho: &Field, p: &Params) -> Result<f64> {
    p.require_not(-1.0, "the entropy dissipation")?;
    rho.check_positive(p.floor)?;
    let b = p.beta;
    let w = pow_field(rho, (b + 3.0) / 2.0);
    let s = pow_field(rho, (b + 1.0) / 2.0).dxx();
    Ok(4.0 / ((b + 1.0) * (b + 1.0)) * (&w * &(&s * &s)).integrate())
}

/// `∫ F_ε(ρ)`.
pub fn f_entropy(rho: &Field, p: &Params) -> Result<f64> {
    p.require_not(-1.0, "F_eps")?;
    Ok(coeff_field(rho, p, raw::f_eps)?.integrate())
}

/// `∫ ρ μ_ε'(ρ) |∂²φ_ε(ρ)|²`, the dissipation paired with `∫F_ε`.
pub fn f_dissipation(rho: &Field, p: &Params) -> Result<f64> {
    p.require_not(-1.0, "phi_eps")?;
    let mp = coeff_field(rho, p, raw::mu_prime)?;
    let phi2 = rho.map(|r| raw::phi(r, p)).dxx();
    Ok((&(rho * &mp) * &(&phi2 * &phi2)).integrate())
}

/// `(∫|∂²ρ^θ|², ∫|∂ρ^{θ/2}|⁴)`.
pub fn theta_norms(rho: &Field, p: &Params) -> Result<(f64, f64)> {
    p.require_not(-5.0 / 3.0, "theta norms (theta = 0)")?;
    rho.check_positive(p.floor)?;
    let th = p.theta;
    Ok((h2(&pow_field(rho, th)), grad4(&pow_field(rho, th / 2.0))))
}

/// `∫ ρ u² + δ ∫ |∂u|²`.
pub fn energy_dissipation(rho: &Field, u: &Field, delta: f64) -> f64 {
    let du = u.dx();
    (&(rho * u) * u).integrate() + delta * (&du * &du).integrate()
}

/// Instantaneous integrands of the ε-uniform bounds. Time integrals and
/// suprema are accumulated by the caller.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct UniformBoundIntegrands {
    /// `∫|∂ρ^{(β+2)/2}|²`
    pub power_energy: f64,
    pub rho_max: f64,
    /// `∫|∂²ρ^θ|²`
    pub theta_h2: f64,
    /// `∫|∂ρ^{θ/2}|⁴`
    pub theta_grad4: f64,
    /// `∫|∂²ρ^{(2β+3)/4}|²`
    pub mid_h2: f64,
    /// `∫|∂ρ^{(2β+3)/8}|⁴`
    pub mid_grad4: f64,
    /// `∫|∂²ρ^{-1/4}|²`
    pub low_h2: f64,
    /// `∫|∂ρ^{-1/8}|⁴`
    pub low_grad4: f64,
}

pub fn uniform_bound_integrands(rho: &Field, p: &Params) -> Result<UniformBoundIntegrands> {
    p.require_admissible("the uniform-bound diagnostics")?;
    rho.check_positive(p.floor)?;
    let b = p.beta;
    let (theta_h2, theta_grad4) = theta_norms(rho, p)?;
    let m = (2.0 * b + 3.0) / 4.0;
    Ok(UniformBoundIntegrands {
        power_energy: power_energy(rho, p)?,
        rho_max: rho.max(),
        theta_h2,
        theta_grad4,
        mid_h2: h2(&pow_field(rho, m)),
        mid_grad4: grad4(&pow_field(rho, m / 2.0)),
        low_h2: h2(&pow_field(rho, -0.25)),
        low_grad4: grad4(&pow_field(rho, -0.125)),
    })
}

/// Per-step monitored values. Entries that do not apply (for instance the
/// entropy at β = -1, or `energy_dissip` without a velocity) are NaN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiagRecord {
    pub t: f64,
    pub mass: f64,
    pub energy: f64,
    pub entropy: f64,
    pub f_entropy: f64,
    pub entropy_dissip: f64,
    pub energy_dissip: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub theta_h2: f64,
    pub theta_grad4: f64,
    pub weak_residual: f64,
}

pub const CSV_COLUMNS: [&str; 12] = [
    "t",
    "mass",
    "energy",
    "entropy",
    "f_entropy",
    "entropy_dissip",
    "energy_dissip",
    "rho_min",
    "rho_max",
    "theta_h2",
    "theta_grad4",
    "weak_residual",
];

/// 17 significant digits, `NaN` for missing entries.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.16e}")
    }
}

impl DiagRecord {
    pub fn csv_header() -> String {
        CSV_COLUMNS.join(",")
    }

    pub fn as_array(&self) -> [f64; 12] {
        [
            self.t,
            self.mass,
            self.energy,
            self.entropy,
            self.f_entropy,
            self.entropy_dissip,
            self.energy_dissip,
            self.rho_min,
            self.rho_max,
            self.theta_h2,
            self.theta_grad4,
            self.weak_residual,
        ]
    }

    pub fn csv_row(&self) -> String {
        self.as_array().iter().map(|v| fmt_num(*v)).collect::<Vec<_>>().join(",")
    }

    /// Evaluates every applicable entry at one state.
    pub fn evaluate(t: f64, rho: &Field, u: Option<&Field>, p: &Params) -> Result<DiagRecord> {
        rho.check_positive(p.floor)?;
        let skip_neg1 = |r: Result<f64>| match r {
            Ok(v) => Ok(v),
            Err(Error::ExcludedBeta { .. }) => Ok(f64::NAN),
            Err(e) => Err(e),
        };
        let (theta_h2, theta_grad4) = match theta_norms(rho, p) {
            Ok(v) => v,
            Err(Error::ExcludedBeta { .. }) => (f64::NAN, f64::NAN),
            Err(e) => return Err(e),
        };
        Ok(DiagRecord {
            t,
            mass: rho.integrate(),
            energy: korteweg_energy(rho, p)?,
            entropy: skip_neg1(entropy(rho, p))?,
            f_entropy: skip_neg1(f_entropy(rho, p))?,
            entropy_dissip: skip_neg1(entropy_dissipation(rho, p))?,
            energy_dissip: u.map_or(f64::NAN, |u| energy_dissipation(rho, u, p.delta_eps)),
            rho_min: rho.min(),
            rho_max: rho.max(),
            theta_h2,
            theta_grad4,
            weak_residual: f64::NAN,
        })
    }
}

pub fn write_csv(records: &[DiagRecord], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{}", DiagRecord::csv_header())?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

fn smooth_exp(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        (-1.0 / x).exp()
    }
}

fn smooth_exp_prime(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        smooth_exp(x) / (x * x)
    }
}

/// C^∞ step: 0 for x ≤ 0, 1 for x ≥ 1; returns (value, derivative).
fn smooth_step(x: f64) -> (f64, f64) {
    let a = smooth_exp(x);
    let b = smooth_exp(1.0 - x);
    let s = a + b;
    let da = smooth_exp_prime(x);
    let db = -smooth_exp_prime(1.0 - x);
    (a / s, (da * s - a * (da + db)) / (s * s))
}

/// C^∞ bump on `(c - r, c + r)` with peak 1; returns (value, derivative).
fn bump(t: f64, c: f64, r: f64) -> (f64, f64) {
    let s = (t - c) / r;
    if s.abs() >= 1.0 {
        return (0.0, 0.0);
    }
    let q = 1.0 - s * s;
    let v = (1.0 - 1.0 / q).exp();
    (v, v * (-2.0 * s / (q * q)) / r)
}

/// Time profile of a test function on `[0, T)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum TimeProfile {
    /// Equal to 1 on `[0, on·T]`, smoothly down to 0 at `off·T`.
    Step { on: f64, off: f64 },
    /// Bump centred at `center·T` with radius `radius·T`.
    Bump { center: f64, radius: f64 },
}

impl TimeProfile {
    /// (η(t), η'(t)) for horizon `t_end`.
    pub fn eval(&self, t: f64, t_end: f64) -> (f64, f64) {
        match *self {
            TimeProfile::Step { on, off } => {
                let w = (off - on) * t_end;
                let (s, ds) = smooth_step((t - on * t_end) / w);
                (1.0 - s, -ds / w)
            }
            TimeProfile::Bump { center, radius } => bump(t, center * t_end, radius * t_end),
        }
    }
}

/// One member `ψ(t, x) = cos(2πkx/L + phase) η(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestFunction {
    pub k: u32,
    pub phase: f64,
    pub profile: TimeProfile,
}

/// Space-time test functions for the weak-form residual.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestBank {
    pub members: Vec<TestFunction>,
}

impl Default for TestBank {
    /// Modes k = 0..4 against three time profiles: 15 members. The step
    /// profile is the only one nonzero at t = 0 and exercises the datum term.
    fn default() -> Self {
        let profiles = [
            TimeProfile::Step { on: 0.25, off: 0.9 },
            TimeProfile::Bump { center: 0.35, radius: 0.3 },
            TimeProfile::Bump { center: 0.6, radius: 0.3 },
        ];
        let mut members = Vec::with_capacity(15);
        for k in 0..5u32 {
            for profile in profiles {
                members.push(TestFunction { k, phase: 0.3 * k as f64, profile });
            }
        }
        TestBank { members }
    }
}

/// Streaming evaluation of the weak-form defect
///
/// ```text
/// -∬ρ ∂tψ + (1/θ)∬ρ^{β+2-θ} ∂²ρ^θ ∂²ψ - (β+3)/θ² ∬ρ^{β+2-θ} |∂ρ^{θ/2}|² ∂²ψ - ∫ρ⁰ψ(0)
/// ```
///
/// for every bank member. Snapshots are pushed in time order; time
/// integrals use the trapezoid rule over them and the horizon is fixed up
/// front.
#[derive(Debug, Clone)]
pub struct WeakResidual {
    members: Vec<(f64, Vec<f64>, TimeProfile)>,
    p: Params,
    t0: f64,
    horizon: f64,
    prev: Option<(f64, Vec<f64>)>,
    totals: Vec<f64>,
    samples: usize,
}

impl WeakResidual {
    pub fn new(grid: &Arc<Grid>, p: &Params, bank: &TestBank, t0: f64, horizon: f64) -> Result<Self> {
        p.require_not(-5.0 / 3.0, "the weak formulation (theta = 0)")?;
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Precondition(format!("weak residual horizon must be positive, got {horizon}")));
        }
        let x = grid.nodes();
        let l = grid.length();
        let members = bank
            .members
            .iter()
            .map(|m| {
                let kk = 2.0 * PI * m.k as f64 / l;
                let cosx = x.iter().map(|&xi| (kk * xi + m.phase).cos()).collect();
                (kk, cosx, m.profile)
            })
            .collect::<Vec<_>>();
        let n = members.len();
        Ok(WeakResidual { members, p: *p, t0, horizon, prev: None, totals: vec![0.0; n], samples: 0 })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Adds the snapshot `(t, rho)`; times must increase strictly.
    pub fn push(&mut self, t: f64, rho: &Field) -> Result<()> {
        if let Some((tp, _)) = &self.prev {
            if !(t > *tp) {
                return Err(Error::Precondition("snapshot times must increase strictly".into()));
            }
        }
        rho.check_positive(self.p.floor)?;
        let (b, th) = (self.p.beta, self.p.theta);
        // flux density G with flux ∂x G
        let w = pow_field(rho, b + 2.0 - th);
        let a = pow_field(rho, th).dxx();
        let gd = pow_field(rho, th / 2.0).dx();
        let c = (b + 3.0) / (th * th);
        let g = w
            .zip_map(&a, |w, a| w * a / th)
            .zip_map(&w.zip_map(&gd, |w, d| w * d * d), |v, q| v - c * q);
        let h = rho.grid().h();
        let s = t - self.t0;
        let integrand: Vec<f64> = self
            .members
            .iter()
            .map(|(kk, cosx, profile)| {
                let (eta, deta) = profile.eval(s, self.horizon);
                let rho_c: f64 = h * rho.values().iter().zip(cosx).map(|(r, c)| r * c).sum::<f64>();
                let g_c: f64 = h * g.values().iter().zip(cosx).map(|(r, c)| r * c).sum::<f64>();
                // ∂²ψ = -k² ψ
                -rho_c * deta - kk * kk * g_c * eta
            })
            .collect();
        match &self.prev {
            None => {
                for ((_, cosx, profile), tot) in self.members.iter().zip(self.totals.iter_mut()) {
                    let (eta0, _) = profile.eval(0.0, self.horizon);
                    let rho0_c: f64 = h * rho.values().iter().zip(cosx).map(|(r, c)| r * c).sum::<f64>();
                    *tot -= rho0_c * eta0;
                }
            }
            Some((tp, prev)) => {
                let dt = t - tp;
                for ((tot, a), b) in self.totals.iter_mut().zip(prev).zip(&integrand) {
                    *tot += 0.5 * dt * (a + b);
                }
            }
        }
        self.prev = Some((t, integrand));
        self.samples += 1;
        Ok(())
    }

    /// Largest absolute defect over the bank.
    pub fn finish(&self) -> Result<f64> {
        if self.samples < 3 {
            return Err(Error::Precondition(format!(
                "weak residual needs at least 3 snapshots, got {}",
                self.samples
            )));
        }
        Ok(self.totals.iter().fold(0.0f64, |m, v| m.max(v.abs())))
    }
}

/// Weak-form defect of a stored trajectory; the last snapshot time is the
/// horizon. See [`WeakResidual`].
pub fn weak_residual(snapshots: &[(f64, Field)], p: &Params, bank: &TestBank) -> Result<f64> {
    if snapshots.len() < 3 {
        return Err(Error::Precondition(format!(
            "weak residual needs at least 3 snapshots, got {}",
            snapshots.len()
        )));
    }
    let t0 = snapshots[0].0;
    let horizon = snapshots.last().unwrap().0 - t0;
    if !(horizon > 0.0) {
        return Err(Error::Precondition("snapshot times must increase strictly".into()));
    }
    let mut acc = WeakResidual::new(snapshots[0].1.grid(), p, bank, t0, horizon)?;
    for (t, rho) in snapshots {
        acc.push(*t, rho)?;
    }
    acc.finish()
}
