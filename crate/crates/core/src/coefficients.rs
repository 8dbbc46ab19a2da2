//! Exponents and coefficient functions of the model family.
//!
//! The family is the Wasserstein gradient flow of the Korteweg energy
//! `∫ κ(ρ) |∂ₓρ|² / 2` with `κ(ρ) = ρ^β`, together with its ε-regularization
//!
//! ```text
//! κ_ε(ρ) = ρ^β + 2ε ρ^{(β-2)/2} + ε² ρ^{-2}
//! μ_ε(ρ) = 2/(β+3) ρ^{(β+3)/2} + 2ε ρ^{1/2}
//! φ_ε(ρ) = 2/(β+1) ρ^{(β+1)/2} - 2ε ρ^{-1/2}
//! F_ε(ρ) = 4/((β+1)(β+3)) ρ^{(β+3)/2} - 4ε ρ^{1/2} + 3/2
//! ```
//!
//! which satisfy `κ_ε = (μ_ε')²/ρ`, `ρ φ_ε' = μ_ε'` and `F_ε' = φ_ε`.
//! Setting ε = 0 recovers the pure power case.
//!
//! Every power is evaluated as `exp(p · ln ρ)`. Densities below the
//! configured floor are a domain error; nothing is clamped.

use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};

/// Default positivity floor below which a density is treated as vacuum.
pub const DEFAULT_FLOOR: f64 = 1e-300;

/// Exponents for which the entropy and identity machinery needs a logarithm.
pub const EXCLUDED_BETAS: [f64; 4] = [-2.0, -5.0 / 3.0, -1.5, -1.0];

const BETA_MATCH_TOL: f64 = 1e-12;

fn is_beta(beta: f64, target: f64) -> bool {
    (beta - target).abs() <= BETA_MATCH_TOL
}

/// Flags marking the log-branch exponents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Exclusions {
    pub minus_two: bool,
    pub minus_five_thirds: bool,
    pub minus_three_halves: bool,
    pub minus_one: bool,
}

impl Exclusions {
    pub fn for_beta(beta: f64) -> Self {
        Exclusions {
            minus_two: is_beta(beta, -2.0),
            minus_five_thirds: is_beta(beta, -5.0 / 3.0),
            minus_three_halves: is_beta(beta, -1.5),
            minus_one: is_beta(beta, -1.0),
        }
    }

    pub fn any(&self) -> bool {
        self.minus_two || self.minus_five_thirds || self.minus_three_halves || self.minus_one
    }
}

/// Exponent β, regularization ε and the quantities derived from them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Params {
    pub beta: f64,
    pub eps: f64,
    /// Damping in the velocity equation. Equal to `delta_schedule(eps)`
    /// unless overridden with [`Params::with_delta`].
    pub delta_eps: f64,
    /// α = (β+2)/2.
    pub alpha: f64,
    /// θ = (3β+5)/4.
    pub theta: f64,
    pub excluded: Exclusions,
    /// Positivity floor for every power evaluation.
    pub floor: f64,
    /// True when `delta_eps` was set by hand instead of by the schedule.
    pub delta_artificial: bool,
}

impl Params {
    /// Any β > -3 and ε in [0, 1). Log-branch exponents are accepted here and
    /// flagged; operations that need them excluded check on their own.
    pub fn new(beta: f64, eps: f64) -> Result<Self> {
        if !beta.is_finite() || beta <= -3.0 {
            return Err(Error::Domain(format!("beta must exceed -3, got {beta}")));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::Domain(format!("eps must lie in [0, 1), got {eps}")));
        }
        Ok(Params {
            beta,
            eps,
            delta_eps: delta_schedule(eps)?,
            alpha: (beta + 2.0) / 2.0,
            theta: (3.0 * beta + 5.0) / 4.0,
            excluded: Exclusions::for_beta(beta),
            floor: DEFAULT_FLOOR,
            delta_artificial: false,
        })
    }

    /// Like [`Params::new`] but rejects β ∈ {-2, -5/3, -3/2, -1}.
    pub fn admissible(beta: f64, eps: f64) -> Result<Self> {
        let p = Self::new(beta, eps)?;
        p.require_admissible("the entropy and identity machinery")?;
        Ok(p)
    }

    /// Builds parameters from α, using β = 2α - 2.
    pub fn from_alpha(alpha: f64, eps: f64) -> Result<Self> {
        if alpha == 0.0 {
            return Err(Error::Domain("alpha must be nonzero".into()));
        }
        Self::new(2.0 * alpha - 2.0, eps)
    }

    /// Overrides the velocity damping. The value is flagged as artificial.
    pub fn with_delta(mut self, delta: f64) -> Result<Self> {
        if !delta.is_finite() || delta < 0.0 {
            return Err(Error::Domain(format!("delta must be finite and >= 0, got {delta}")));
        }
        self.delta_eps = delta;
        self.delta_artificial = true;
        Ok(self)
    }

    pub fn with_floor(mut self, floor: f64) -> Result<Self> {
        if !(floor > 0.0) {
            return Err(Error::Domain(format!("floor must be positive, got {floor}")));
        }
        self.floor = floor;
        Ok(self)
    }

    pub fn require_admissible(&self, what: &'static str) -> Result<()> {
        if self.excluded.any() {
            Err(Error::ExcludedBeta { beta: self.beta, what })
        } else {
            Ok(())
        }
    }

    pub(crate) fn require_not(&self, target: f64, what: &'static str) -> Result<()> {
        if is_beta(self.beta, target) {
            Err(Error::ExcludedBeta { beta: self.beta, what })
        } else {
            Ok(())
        }
    }

    fn check_rho(&self, rho: f64) -> Result<()> {
        if rho.is_nan() || rho < self.floor {
            Err(Error::Domain(format!("density {rho:e} is below the floor {:e}", self.floor)))
        } else {
            Ok(())
        }
    }

    /// Constant `C` in `ρ |μ_ε''(ρ)| ≤ C μ_ε'(ρ)`: |β+1|/2 in the power case,
    /// the larger of the two branch constants when ε > 0.
    pub fn power2_constant(&self) -> f64 {
        let power = (self.beta + 1.0).abs() / 2.0;
        if self.eps > 0.0 {
            power.max(0.5)
        } else {
            power
        }
    }
}

/// `δ_ε = ε⁶ exp(-1/(2ε²))`, zero at ε = 0.
pub fn delta_schedule(eps: f64) -> Result<f64> {
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::Domain(format!("eps must be >= 0, got {eps}")));
    }
    if eps == 0.0 {
        return Ok(0.0);
    }
    Ok(eps.powi(6) * (-1.0 / (2.0 * eps * eps)).exp())
}

/// Scalar type the coefficient formulas are written over, so the same code
/// path can be evaluated at complex arguments (complex-step derivatives).
pub trait CoeffScalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Mul<f64, Output = Self>
{
    fn ln(self) -> Self;
    fn exp(self) -> Self;
    fn constant(c: f64) -> Self;
}

impl CoeffScalar for f64 {
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn constant(c: f64) -> Self {
        c
    }
}

impl CoeffScalar for Complex64 {
    fn ln(self) -> Self {
        Complex64::ln(self)
    }
    fn exp(self) -> Self {
        Complex64::exp(self)
    }
    fn constant(c: f64) -> Self {
        Complex64::new(c, 0.0)
    }
}

/// `ρ^p` as `exp(p ln ρ)`.
#[inline]
pub fn pow<T: CoeffScalar>(rho: T, p: f64) -> T {
    (rho.ln() * p).exp()
}

/// Unchecked formulas. Callers guarantee positivity and admissible β.
pub mod raw {
    use super::{pow, CoeffScalar, Params};

    pub fn kappa<T: CoeffScalar>(rho: T, p: &Params) -> T {
        let b = p.beta;
        let e = p.eps;
        let mut k = pow(rho, b);
        if e != 0.0 {
            k = k + pow(rho, (b - 2.0) / 2.0) * (2.0 * e) + pow(rho, -2.0) * (e * e);
        }
        k
    }

    pub fn kappa_prime<T: CoeffScalar>(rho: T, p: &Params) -> T {
        let b = p.beta;
        let e = p.eps;
        let mut k = pow(rho, b - 1.0) * b;
        if e != 0.0 {
            k = k + pow(rho, (b - 4.0) / 2.0) * (e * (b - 2.0)) - pow(rho, -3.0) * (2.0 * e * e);
        }
        k
    }

    pub fn mu<T: CoeffScalar>(rho: T, p: &Params) -> T {
        let b = p.beta;
        pow(rho, (b + 3.0) / 2.0) * (2.0 / (b + 3.0)) + pow(rho, 0.5) * (2.0 * p.eps)
    }

    pub fn mu_prime<T: CoeffScalar>(rho: T, p: &Params) -> T {
        pow(rho, (p.beta + 1.0) / 2.0) + pow(rho, -0.5) * p.eps
    }

    pub fn mu_second<T: CoeffScalar>(rho: T, p: &Params) -> T {
        let b = p.beta;
        pow(rho, (b - 1.0) / 2.0) * ((b + 1.0) / 2.0) - pow(rho, -1.5) * (0.5 * p.eps)
    }

    pub fn phi<T: CoeffScalar>(rho: T, p: &Params) -> T {
        let b = p.beta;
        pow(rho, (b + 1.0) / 2.0) * (2.0 / (b + 1.0)) - pow(rho, -0.5) * (2.0 * p.eps)
    }

    pub fn phi_prime<T: CoeffScalar>(rho: T, p: &Params) -> T {
        pow(rho, (p.beta - 1.0) / 2.0) + pow(rho, -1.5) * p.eps
    }

    pub fn f_eps<T: CoeffScalar>(rho: T, p: &Params) -> T {
        let b = p.beta;
        pow(rho, (b + 3.0) / 2.0) * (4.0 / ((b + 1.0) * (b + 3.0))) - pow(rho, 0.5) * (4.0 * p.eps)
            + T::constant(1.5)
    }
}

/// κ_ε(ρ). With ε = 0 this is ρ^β.
pub fn kappa_eps(rho: f64, p: &Params) -> Result<f64> {
    p.check_rho(rho)?;
    Ok(raw::kappa(rho, p))
}

/// κ_ε'(ρ).
pub fn kappa_eps_prime(rho: f64, p: &Params) -> Result<f64> {
    p.check_rho(rho)?;
    Ok(raw::kappa_prime(rho, p))
}

pub fn mu_eps(rho: f64, p: &Params) -> Result<f64> {
    p.check_rho(rho)?;
    Ok(raw::mu(rho, p))
}

pub fn mu_eps_prime(rho: f64, p: &Params) -> Result<f64> {
    p.check_rho(rho)?;
    Ok(raw::mu_prime(rho, p))
}

pub fn mu_eps_second(rho: f64, p: &Params) -> Result<f64> {
    p.check_rho(rho)?;
    Ok(raw::mu_second(rho, p))
}

/// φ_ε(ρ); undefined (log branch) at β = -1.
pub fn phi_eps(rho: f64, p: &Params) -> Result<f64> {
    p.require_not(-1.0, "phi_eps")?;
    p.check_rho(rho)?;
    Ok(raw::phi(rho, p))
}

pub fn phi_eps_prime(rho: f64, p: &Params) -> Result<f64> {
    p.require_not(-1.0, "phi_eps")?;
    p.check_rho(rho)?;
    Ok(raw::phi_prime(rho, p))
}

/// F_ε(ρ), the antiderivative of φ_ε; undefined at β = -1.
pub fn f_eps(rho: f64, p: &Params) -> Result<f64> {
    p.require_not(-1.0, "F_eps")?;
    p.check_rho(rho)?;
    Ok(raw::f_eps(rho, p))
}

/// θ = (k+2)/2 obtained from a weight ρ^k in
/// `∫ρ^k (|∂²ρ|² + |∂ρ|⁴/ρ²)`; `None` for the log case k = -2.
pub fn theta_from_weight(k: f64) -> Option<f64> {
    if is_beta(k, -2.0) {
        None
    } else {
        Some((k + 2.0) / 2.0)
    }
}

/// `c(β) = (β+3)²/θ² - 8(β+3)/(3θ)`, the coefficient of `∫|∂ρ^{θ/2}|⁴`
/// in the exact expansion of the entropy dissipation.
pub fn lemma_a_c(beta: f64) -> Result<f64> {
    let theta = (3.0 * beta + 5.0) / 4.0;
    if is_beta(beta, -5.0 / 3.0) {
        return Err(Error::ExcludedBeta { beta, what: "lemma A (theta = 0)" });
    }
    let r = (beta + 3.0) / theta;
    Ok(r * r - 8.0 * r / 3.0)
}

/// Constant bounding `∫|∂²ρ^θ|²` by `∫ρ^{(β+3)/2}|∂²ρ^{(β+1)/2}|²`:
/// `K = (2θ/(β+1))²` if `c(β) ≥ 0`, else `K / (1 + 9c/16)`.
pub fn lemma_a_constant(beta: f64) -> Result<f64> {
    if is_beta(beta, -1.0) {
        return Err(Error::ExcludedBeta { beta, what: "lemma A" });
    }
    let c = lemma_a_c(beta)?;
    let theta = (3.0 * beta + 5.0) / 4.0;
    let k = (2.0 * theta / (beta + 1.0)).powi(2);
    if c >= 0.0 {
        Ok(k)
    } else {
        let margin = 1.0 + 9.0 * c / 16.0;
        if margin <= 0.0 {
            return Err(Error::Domain(format!("16/9 + c(beta) is not positive at beta = {beta}")));
        }
        Ok(k / margin)
    }
}
