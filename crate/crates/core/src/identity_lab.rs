//! Pointwise identities and functional inequalities checked on banks of
//! smooth positive trial densities.
//!
//! Pointwise residuals are reported as `‖L - R‖∞ / max(1, ‖L‖∞, ‖R‖∞)`: the
//! two sides contain third derivatives whose size grows like `k³` on the
//! oscillatory bank members, and an unscaled max-norm would measure that
//! amplitude rather than agreement.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::coefficients::{lemma_a_c, lemma_a_constant, raw, Params};
use crate::error::{Error, Result};
use crate::functionals::{coeff_field, pow_field};
use crate::grid::{Field, Grid};

/// Exponents swept by the suite. Log-branch values are never listed.
pub const BETA_GRID: [f64; 10] = [-2.9, -2.5, -2.1, -1.9, -1.3, -0.5, 0.0, 0.5, 1.0, 2.0];

/// Relative Fourier-coefficient cut used by the lab's spectral grids.
pub const DEFAULT_CHOP: f64 = 1e-15;

pub const TOL_FIRST_VARIATION: f64 = 1e-8;
pub const TOL_INTEGRAL: f64 = 1e-9;
pub const TOL_ENTROPY_FLUX: f64 = 1e-8;
pub const TOL_LEMMA_A_IDENTITY: f64 = 1e-8;
pub const TOL_LEMMA_A_BOUND: f64 = 1e-6;
pub const TOL_FOUR_THIRDS: f64 = 1e-9;
pub const TOL_FOUR_THIRDS_RATIO: f64 = 1e-8;
pub const TOL_KORT_STABILITY: f64 = 0.05;

/// Floor of the near-vacuum member.
pub const NEAR_VACUUM_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct BankMember {
    pub label: String,
    pub rho: Field,
}

/// Deterministic trial densities, all with unit mean.
#[derive(Debug, Clone)]
pub struct TrialBank {
    pub seed: u64,
    pub members: Vec<BankMember>,
}

impl TrialBank {
    /// Constant, nine cosines `1 + a cos(2πkx/L)`, `exp(0.8 sin)`, a
    /// near-vacuum bump over a 1e-3 floor, and two seeded random
    /// exponentials of trigonometric polynomials.
    pub fn standard(grid: &Arc<Grid>, seed: u64) -> TrialBank {
        let l = grid.length();
        let w = 2.0 * PI / l;
        let mut members = vec![BankMember { label: "constant".into(), rho: Field::constant(grid, 1.0) }];
        for a in [0.1, 0.5, 0.9] {
            for k in [1.0, 2.0, 3.0] {
                members.push(BankMember {
                    label: format!("cosine(a={a},k={k})"),
                    rho: Field::from_fn(grid, |x| 1.0 + a * (k * w * x).cos()),
                });
            }
        }
        members.push(BankMember {
            label: "expsin(a=0.8)".into(),
            rho: normalized(Field::from_fn(grid, |x| (0.8 * (w * x).sin()).exp())),
        });
        let bump = normalized(Field::from_fn(grid, |x| (5.0 * ((w * x).cos() - 1.0)).exp()));
        let c = 1.0 - NEAR_VACUUM_FLOOR;
        members.push(BankMember {
            label: format!("bump(floor={NEAR_VACUUM_FLOOR})"),
            rho: bump.map(|v| NEAR_VACUUM_FLOOR + c * v),
        });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for r in 0..2 {
            let coeffs: Vec<(f64, f64)> = (1..=4)
                .map(|m| {
                    let s = 0.3 / m as f64;
                    (rng.gen_range(-s..s), rng.gen_range(-s..s))
                })
                .collect();
            let f = Field::from_fn(grid, |x| {
                coeffs
                    .iter()
                    .enumerate()
                    .map(|(i, (a, b))| {
                        let kx = (i + 1) as f64 * w * x;
                        a * kx.cos() + b * kx.sin()
                    })
                    .sum::<f64>()
                    .exp()
            });
            members.push(BankMember { label: format!("random(seed={seed},#{r})"), rho: normalized(f) });
        }
        TrialBank { seed, members }
    }

    /// The same bank regenerated on another grid.
    pub fn on_grid(&self, grid: &Arc<Grid>) -> TrialBank {
        TrialBank::standard(grid, self.seed)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.members[0].rho.grid()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Bank with every density multiplied by `c`.
    pub fn scaled(&self, c: f64) -> TrialBank {
        TrialBank {
            seed: self.seed,
            members: self
                .members
                .iter()
                .map(|m| BankMember { label: format!("{}*{c}", m.label), rho: m.rho.scale(c) })
                .collect(),
        }
    }
}

fn normalized(f: Field) -> Field {
    let m = f.mean();
    f.scale(1.0 / m)
}

/// Spectral grid of the lab: `n` points on the unit torus, with chopping.
pub fn lab_grid(n: usize) -> Result<Arc<Grid>> {
    Grid::unit(n)?.with_chop(Some(DEFAULT_CHOP))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityReport {
    pub name: String,
    pub beta: f64,
    pub eps: f64,
    pub n: usize,
    pub max_residual: f64,
    pub constant_estimate: Option<f64>,
    pub formula_constant: Option<f64>,
    pub passed: bool,
    /// Bank index attaining `max_residual` (lowest index on ties).
    pub worst_case: usize,
}

fn scaled_diff(l: &Field, r: &Field) -> f64 {
    let scale = 1f64.max(l.max_abs()).max(r.max_abs());
    (l - r).max_abs() / scale
}

fn relative(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// `Λ = ∂(κ_ε ∂ρ) - κ_ε'/2 |∂ρ|²`.
pub fn first_variation(rho: &Field, p: &Params) -> Result<Field> {
    let k = coeff_field(rho, p, raw::kappa)?;
    let kp = rho.map(|r| raw::kappa_prime(r, p));
    let d = rho.dx();
    let flux = (&k * &d).dx();
    Ok(flux.zip_map(&(&kp * &(&d * &d)), |a, b| a - 0.5 * b))
}

/// Scaled max-norm defect of `ρ ∂Λ = ∂(ρ μ_ε' ∂²φ_ε)`.
pub fn check_first_variation(rho: &Field, p: &Params) -> Result<f64> {
    p.require_not(-1.0, "phi_eps")?;
    let lhs = rho * &first_variation(rho, p)?.dx();
    let mp = rho.map(|r| raw::mu_prime(r, p));
    let phi = rho.map(|r| raw::phi(r, p));
    let rhs = (&(rho * &mp) * &phi.dxx()).dx();
    Ok(scaled_diff(&lhs, &rhs))
}

/// The two sides `(∫Λ ∂²μ_ε, ∫ρ μ_ε' |∂²φ_ε|²)`.
pub fn integral_identity_sides(rho: &Field, p: &Params) -> Result<(f64, f64)> {
    p.require_not(-1.0, "phi_eps")?;
    let lam = first_variation(rho, p)?;
    let mu2 = rho.map(|r| raw::mu(r, p)).dxx();
    let mp = rho.map(|r| raw::mu_prime(r, p));
    let phi2 = rho.map(|r| raw::phi(r, p)).dxx();
    Ok(((&lam * &mu2).integrate(), (&(rho * &mp) * &(&phi2 * &phi2)).integrate()))
}

/// Relative defect of the integrated identity; 0 when both sides vanish.
pub fn check_integral_identity(rho: &Field, p: &Params) -> Result<f64> {
    let (a, b) = integral_identity_sides(rho, p)?;
    Ok(relative(a, b))
}

/// `2/(β+1) ∂(ρ^{(β+3)/2} ∂²ρ^{(β+1)/2})`.
pub fn entropy_flux(rho: &Field, p: &Params) -> Result<Field> {
    p.require_not(-1.0, "the entropy flux")?;
    rho.check_positive(p.floor)?;
    let b = p.beta;
    let w = pow_field(rho, (b + 3.0) / 2.0);
    let s = pow_field(rho, (b + 1.0) / 2.0).dxx();
    Ok((&w * &s).dx().scale(2.0 / (b + 1.0)))
}

fn power_case(p: &Params) -> Result<()> {
    if p.eps != 0.0 {
        return Err(Error::Precondition("the entropy flux identity is stated for eps = 0".into()));
    }
    Ok(())
}

/// Scaled defect of `ρ ∂Λ = 2/(β+1) ∂(ρ^{(β+3)/2} ∂²ρ^{(β+1)/2})` (ε = 0).
pub fn check_entropy_flux_identity(rho: &Field, p: &Params) -> Result<f64> {
    power_case(p)?;
    let rhs = entropy_flux(rho, p)?;
    let lhs = rho * &first_variation(rho, p)?.dx();
    Ok(scaled_diff(&lhs, &rhs))
}

/// Scaled defect between the entropy-flux form and `∂(ρ μ' ∂²φ)` at ε = 0.
pub fn check_flux_forms_agree(rho: &Field, p: &Params) -> Result<f64> {
    power_case(p)?;
    let a = entropy_flux(rho, p)?;
    let mp = rho.map(|r| raw::mu_prime(r, p));
    let phi = rho.map(|r| raw::phi(r, p));
    let b = (&(rho * &mp) * &phi.dxx()).dx();
    Ok(scaled_diff(&a, &b))
}

/// `LHS / RHS` of `∫ρ²φ'³(|∂²ρ|² + |∂ρ|⁴/ρ²) ≤ C ∫ρ μ' |∂²φ|²`, with 0/0 = 0.
/// `None` flags a positive left side over a zero right side.
pub fn kort_ratio(rho: &Field, p: &Params) -> Result<Option<f64>> {
    p.require_not(-1.0, "phi_eps")?;
    let php = coeff_field(rho, p, raw::phi_prime)?;
    let d = rho.dx();
    let d2 = rho.dxx();
    let inner = d2.zip_map(&d.zip_map(rho, |d, r| d * d / r), |a, b| a * a + b * b);
    let weight = rho.zip_map(&php, |r, f| r * r * f * f * f);
    let lhs = (&weight * &inner).integrate();
    let (_, rhs) = integral_identity_sides(rho, p)?;
    Ok(ratio(lhs, rhs))
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    if den == 0.0 {
        if num == 0.0 {
            Some(0.0)
        } else {
            None
        }
    } else {
        Some(num / den)
    }
}

/// Integrals entering the appendix estimate for one density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AppendixIntegrals {
    /// `∫|∂²ρ^θ|²`
    pub h2: f64,
    /// `∫|∂ρ^{θ/2}|⁴`
    pub grad4: f64,
    /// `∫∂²ρ^θ |∂ρ^{θ/2}|²`
    pub cross: f64,
    /// `∫ρ^{(β+3)/2} |∂²ρ^{(β+1)/2}|²`
    pub dissipation: f64,
}

pub fn appendix_integrals(rho: &Field, beta: f64) -> Result<AppendixIntegrals> {
    let p = Params::admissible(beta, 0.0)?;
    rho.check_positive(p.floor)?;
    let th = p.theta;
    let g2 = pow_field(rho, th).dxx();
    let s1 = pow_field(rho, th / 2.0).dx();
    let w = &s1 * &s1;
    let sd = pow_field(rho, (beta + 1.0) / 2.0).dxx();
    Ok(AppendixIntegrals {
        h2: (&g2 * &g2).integrate(),
        grad4: (&w * &w).integrate(),
        cross: (&g2 * &w).integrate(),
        dissipation: (&pow_field(rho, (beta + 3.0) / 2.0) * &(&sd * &sd)).integrate(),
    })
}

impl AppendixIntegrals {
    /// Relative defect of `∫|∂²g|² + c ∫|∂s|⁴ = K ∫ρ^{(β+3)/2}|∂²ρ^{(β+1)/2}|²`.
    pub fn identity_defect(&self, beta: f64) -> Result<f64> {
        let c = lemma_a_c(beta)?;
        let th = (3.0 * beta + 5.0) / 4.0;
        let k = (2.0 * th / (beta + 1.0)).powi(2);
        let lhs = self.h2 + c * self.grad4;
        let rhs = k * self.dissipation;
        let scale = self.h2.abs().max((c * self.grad4).abs()).max(rhs.abs());
        Ok(if scale == 0.0 { 0.0 } else { (lhs - rhs).abs() / scale })
    }

    /// `|∫∂²g |∂s|² - 4/3 ∫|∂s|⁴| / (1 + 4/3 ∫|∂s|⁴)`.
    pub fn four_thirds_defect(&self) -> f64 {
        let t = 4.0 / 3.0 * self.grad4;
        (self.cross - t).abs() / (1.0 + t.abs())
    }

    /// `∫∂²g |∂s|² / ∫|∂s|⁴`, `None` for constants.
    pub fn four_thirds_ratio(&self) -> Option<f64> {
        if self.grad4 == 0.0 {
            None
        } else {
            Some(self.cross / self.grad4)
        }
    }

    pub fn bernis_ratio(&self) -> Option<f64> {
        ratio(16.0 / 9.0 * self.grad4, self.h2)
    }

    pub fn lemma_a_ratio(&self) -> Option<f64> {
        ratio(self.h2, self.dissipation)
    }
}

/// Max with the lowest index kept on ties.
fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        let v = if v.is_nan() { f64::INFINITY } else { v };
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn per_member<T: Send>(
    bank: &TrialBank,
    f: impl Fn(&Field) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    bank.members.par_iter().map(|m| f(&m.rho)).collect()
}

fn residual_report(name: &str, bank: &TrialBank, p: &Params, tol: f64, values: &[f64]) -> IdentityReport {
    let (worst, max) = argmax(values);
    IdentityReport {
        name: name.into(),
        beta: p.beta,
        eps: p.eps,
        n: bank.grid().n(),
        max_residual: max,
        constant_estimate: None,
        formula_constant: None,
        passed: max <= tol,
        worst_case: worst,
    }
}

pub fn first_variation_report(bank: &TrialBank, p: &Params) -> Result<IdentityReport> {
    let v = per_member(bank, |r| check_first_variation(r, p))?;
    Ok(residual_report("first_variation", bank, p, TOL_FIRST_VARIATION, &v))
}

pub fn integral_identity_report(bank: &TrialBank, p: &Params) -> Result<IdentityReport> {
    let v = per_member(bank, |r| check_integral_identity(r, p))?;
    Ok(residual_report("integral_identity", bank, p, TOL_INTEGRAL, &v))
}

pub fn entropy_flux_report(bank: &TrialBank, p: &Params) -> Result<IdentityReport> {
    let v = per_member(bank, |r| check_entropy_flux_identity(r, p))?;
    Ok(residual_report("entropy_flux", bank, p, TOL_ENTROPY_FLUX, &v))
}

/// Measures the bank constant at the bank's resolution and at twice it.
/// Passes when every ratio is finite and the two estimates agree to 5%.
pub fn check_kort_inequality(bank: &TrialBank, p: &Params) -> Result<IdentityReport> {
    let coarse = per_member(bank, |r| kort_ratio(r, p))?;
    let g = bank.grid();
    let fine_grid = Grid::new(2 * g.n(), g.length(), g.backend())?.with_chop(g.chop())?;
    let fine = per_member(&bank.on_grid(&fine_grid), |r| kort_ratio(r, p))?;
    let finite = coarse.iter().chain(&fine).all(|r| matches!(r, Some(v) if v.is_finite()));
    let c: Vec<f64> = coarse.iter().map(|r| r.unwrap_or(f64::INFINITY)).collect();
    let f: Vec<f64> = fine.iter().map(|r| r.unwrap_or(f64::INFINITY)).collect();
    let (worst, est) = argmax(&c);
    let (_, est_fine) = argmax(&f);
    let drift = relative(est, est_fine);
    Ok(IdentityReport {
        name: "kort".into(),
        beta: p.beta,
        eps: p.eps,
        n: g.n(),
        max_residual: drift,
        constant_estimate: Some(est),
        formula_constant: None,
        passed: finite && drift <= TOL_KORT_STABILITY,
        worst_case: worst,
    })
}

fn appendix_all(bank: &TrialBank, beta: f64) -> Result<Vec<AppendixIntegrals>> {
    Params::admissible(beta, 0.0)?;
    per_member(bank, |r| appendix_integrals(r, beta))
}

fn appendix_report(name: &str, bank: &TrialBank, beta: f64) -> IdentityReport {
    IdentityReport {
        name: name.into(),
        beta,
        eps: 0.0,
        n: bank.grid().n(),
        max_residual: 0.0,
        constant_estimate: None,
        formula_constant: None,
        passed: false,
        worst_case: 0,
    }
}

/// The exact identity behind the appendix estimate, member by member.
pub fn check_lemma_a_identity(bank: &TrialBank, beta: f64) -> Result<IdentityReport> {
    let ints = appendix_all(bank, beta)?;
    let defects = ints.iter().map(|i| i.identity_defect(beta)).collect::<Result<Vec<_>>>()?;
    let (worst, max) = argmax(&defects);
    let mut r = appendix_report("lemma_a_identity", bank, beta);
    r.max_residual = max;
    r.worst_case = worst;
    r.passed = max <= TOL_LEMMA_A_IDENTITY;
    Ok(r)
}

/// Bank maximum of `∫|∂²ρ^θ|² / ∫ρ^{(β+3)/2}|∂²ρ^{(β+1)/2}|²` against the
/// closed-form constant. `max_residual` is the relative excess over it.
pub fn check_lemma_a(bank: &TrialBank, beta: f64) -> Result<IdentityReport> {
    let ints = appendix_all(bank, beta)?;
    let formula = lemma_a_constant(beta)?;
    let ratios: Vec<f64> = ints.iter().map(|i| i.lemma_a_ratio().unwrap_or(f64::INFINITY)).collect();
    let (worst, est) = argmax(&ratios);
    let excess = (est / formula - 1.0).max(0.0);
    let mut r = appendix_report("lemma_a", bank, beta);
    r.max_residual = excess;
    r.constant_estimate = Some(est);
    r.formula_constant = Some(formula);
    r.worst_case = worst;
    r.passed = excess <= TOL_LEMMA_A_BOUND;
    Ok(r)
}

/// Integration-by-parts identity `∫∂²g |∂s|² = 4/3 ∫|∂s|⁴`, `g = s²`.
/// Passes when the normalized defect is within 1e-9 and the ratio of the two
/// integrals within 1e-8 of 4/3 on every nonconstant member.
pub fn check_four_thirds(bank: &TrialBank, beta: f64) -> Result<IdentityReport> {
    let ints = appendix_all(bank, beta)?;
    let defects: Vec<f64> = ints.iter().map(|i| i.four_thirds_defect()).collect();
    let ratio_dev: Vec<f64> = ints
        .iter()
        .map(|i| i.four_thirds_ratio().map_or(0.0, |r| (r - 4.0 / 3.0).abs()))
        .collect();
    let (worst, max) = argmax(&defects);
    let (rworst, rmax) = argmax(&ratio_dev);
    let mut r = appendix_report("four_thirds", bank, beta);
    r.max_residual = max;
    r.worst_case = worst;
    r.constant_estimate = ints[rworst].four_thirds_ratio().or(Some(4.0 / 3.0));
    r.formula_constant = Some(4.0 / 3.0);
    r.passed = max <= TOL_FOUR_THIRDS && rmax <= TOL_FOUR_THIRDS_RATIO;
    Ok(r)
}

/// `(16/9) ∫|∂s|⁴ ≤ ∫|∂²g|²`; the estimate is the bank maximum of the ratio.
pub fn check_bernis(bank: &TrialBank, beta: f64) -> Result<IdentityReport> {
    let ints = appendix_all(bank, beta)?;
    let ratios: Vec<f64> = ints.iter().map(|i| i.bernis_ratio().unwrap_or(f64::INFINITY)).collect();
    let (worst, est) = argmax(&ratios);
    let mut r = appendix_report("bernis", bank, beta);
    r.max_residual = (est - 1.0).max(0.0);
    r.constant_estimate = Some(est);
    r.formula_constant = Some(1.0);
    r.worst_case = worst;
    r.passed = est <= 1.0;
    Ok(r)
}

/// Every report for one exponent: the pointwise and integral identities at
/// `eps`, then the power-case checks.
pub fn verify_beta(bank: &TrialBank, beta: f64, eps: f64) -> Result<Vec<IdentityReport>> {
    let p = Params::admissible(beta, eps)?;
    let p0 = Params::admissible(beta, 0.0)?;
    Ok(vec![
        first_variation_report(bank, &p)?,
        integral_identity_report(bank, &p)?,
        entropy_flux_report(bank, &p0)?,
        check_kort_inequality(bank, &p)?,
        check_lemma_a_identity(bank, beta)?,
        check_lemma_a(bank, beta)?,
        check_four_thirds(bank, beta)?,
        check_bernis(bank, beta)?,
    ])
}
