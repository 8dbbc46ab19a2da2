//! Periodic velocity equation `-δ ∂²u + ρ u = rhs`.
//!
//! Spectral grids use preconditioned conjugate gradients with the
//! constant-coefficient symbol `δk² + mean(ρ)` as preconditioner. FD4 grids
//! factor the pentadiagonal band directly and fold the periodic corner
//! entries back in with a rank-4 Woodbury correction.

use crate::coefficients::{raw, Params};
use crate::error::{Error, Result};
use crate::functionals::coeff_field;
use crate::grid::{Backend, Field, Grid};

/// Minimum density accepted when δ = 0.
pub const DEFAULT_DIAGONAL_FLOOR: f64 = 1e-10;

const PCG_TOL: f64 = 1e-12;
const PCG_MAX_ITERS: usize = 1000;

/// `∂x(ρ μ_ε'(ρ) ∂²φ_ε(ρ))`. Zero mean by construction.
pub fn assemble_rhs(rho: &Field, p: &Params) -> Result<Field> {
    p.require_not(-1.0, "phi_eps")?;
    let mp = coeff_field(rho, p, raw::mu_prime)?;
    let phi = rho.map(|r| raw::phi(r, p));
    Ok((&(rho * &mp) * &phi.dxx()).dx())
}

#[derive(Debug, Clone)]
pub struct EllipticProblem {
    pub rho: Field,
    pub delta: f64,
    pub rhs: Field,
    /// Positivity floor for `rho` in the diagonal case.
    pub floor: f64,
}

impl EllipticProblem {
    pub fn new(rho: Field, delta: f64, rhs: Field) -> Result<Self> {
        let prob = EllipticProblem { rho, delta, rhs, floor: DEFAULT_DIAGONAL_FLOOR };
        prob.validate()?;
        Ok(prob)
    }

    /// Problem with the divergence right-hand side of the regularized system.
    pub fn from_density(rho: Field, p: &Params) -> Result<Self> {
        let rhs = assemble_rhs(&rho, p)?;
        let prob = Self::new(rho, p.delta_eps, rhs)?;
        prob.check_zero_mean()?;
        Ok(prob)
    }

    fn validate(&self) -> Result<()> {
        if self.rho.len() != self.rhs.len() {
            return Err(Error::Precondition("rho and rhs differ in length".into()));
        }
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(Error::Precondition(format!("delta must be finite and >= 0, got {}", self.delta)));
        }
        let floor = if self.delta == 0.0 { self.floor } else { 0.0 };
        self.rho.check_positive(floor)
    }

    /// Sanity check for right-hand sides assembled as a divergence.
    pub fn check_zero_mean(&self) -> Result<()> {
        let m = self.rhs.integrate();
        let scale = 1.0 + self.rhs.max_abs();
        if m.abs() > 1e-12 * scale {
            return Err(Error::Precondition(format!("divergence rhs has mean {m:e}")));
        }
        Ok(())
    }

    fn apply(&self, u: &Field) -> Field {
        let lap = u.dxx();
        let d = self.delta;
        lap.zip_map(&(&self.rho * u), |l, r| -d * l + r)
    }

    /// `‖-δ ∂²u + ρu - rhs‖∞`.
    pub fn residual(&self, u: &Field) -> f64 {
        (&self.apply(u) - &self.rhs).max_abs()
    }
}

/// Solves and returns `(u, max-norm residual)`. Fails if the residual misses
/// `1e-10 (1 + ‖rhs‖∞)`.
pub fn solve_velocity(prob: &EllipticProblem) -> Result<(Field, f64)> {
    prob.validate()?;
    let grid = prob.rho.grid().clone();
    let u = if prob.delta == 0.0 {
        prob.rhs.zip_map(&prob.rho, |f, r| f / r)
    } else {
        match grid.backend() {
            Backend::Spectral => solve_spectral(prob, &grid)?,
            Backend::Fd4 => solve_banded(prob, &grid)?,
        }
    };
    let res = prob.residual(&u);
    let bound = 1e-10 * (1.0 + prob.rhs.max_abs());
    if !(res <= bound) {
        return Err(Error::SolverBreakdown(format!(
            "velocity residual {res:e} exceeds {bound:e} (delta {:e}, min rho {:e})",
            prob.delta,
            prob.rho.min()
        )));
    }
    Ok((u, res))
}

fn solve_spectral(prob: &EllipticProblem, grid: &Grid) -> Result<Field> {
    let rho_bar = prob.rho.mean();
    let delta = prob.delta;
    let precond = |r: &Field| {
        Field::from_vec(
            r.grid(),
            grid.apply_multiplier(r.values(), |j| 1.0 / (rho_bar - delta * grid.dxx_symbol(j))),
        )
    };
    let tol = PCG_TOL * (1.0 + prob.rhs.max_abs());
    pcg(|u| prob.apply(u), precond, &prob.rhs, None, tol, PCG_MAX_ITERS)
}

/// Preconditioned conjugate gradients for a symmetric positive definite
/// operator. Stops when the max-norm residual is at most `tol`.
pub(crate) fn pcg(
    apply: impl Fn(&Field) -> Field,
    precond: impl Fn(&Field) -> Field,
    b: &Field,
    x0: Option<Field>,
    tol: f64,
    max_iters: usize,
) -> Result<Field> {
    let mut x = x0.unwrap_or_else(|| precond(b));
    let mut r = b - &apply(&x);
    if r.max_abs() <= tol {
        return Ok(x);
    }
    let mut z = precond(&r);
    let mut dir = z.clone();
    let mut rz = r.dot(&z);
    let mut best = (r.max_abs(), x.clone());
    for _ in 0..max_iters {
        let ad = apply(&dir);
        let dad = dir.dot(&ad);
        if !(dad > 0.0) {
            return Err(Error::SolverBreakdown(format!(
                "operator not positive definite along search direction (pAp = {dad:e})"
            )));
        }
        let alpha = rz / dad;
        x = x.axpy(alpha, &dir);
        r = r.axpy(-alpha, &ad);
        let rn = r.max_abs();
        if rn < best.0 {
            best = (rn, x.clone());
        }
        if rn <= tol {
            // Recompute the true residual; recurrences drift.
            let true_r = b - &apply(&x);
            if true_r.max_abs() <= tol {
                return Ok(x);
            }
            r = true_r;
        }
        z = precond(&r);
        let rz_new = r.dot(&z);
        if !(rz_new > 0.0) {
            // residual vanished in the preconditioned norm
            break;
        }
        let beta = rz_new / rz;
        rz = rz_new;
        dir = z.axpy(beta, &dir);
    }
    // Round-off floor above tol: hand back the best iterate and let the caller
    // judge the residual.
    log::debug!("pcg stopped at max-norm residual {:e} (tol {tol:e})", best.0);
    Ok(best.1)
}

/// Pentadiagonal band LU without pivoting (the band is SPD).
struct BandLu {
    n: usize,
    /// `a[i][k]` holds entry `(i, i + k - 2)`.
    a: Vec<[f64; 5]>,
}

impl BandLu {
    fn factor(mut a: Vec<[f64; 5]>) -> Result<Self> {
        let n = a.len();
        for k in 0..n {
            let piv = a[k][2];
            if !(piv > 0.0) {
                return Err(Error::SolverBreakdown(format!("nonpositive pivot {piv:e} at row {k}")));
            }
            for i in (k + 1)..(k + 3).min(n) {
                let off = i - k;
                let l = a[i][2 - off] / piv;
                a[i][2 - off] = l;
                for j in (k + 1)..(k + 3).min(n) {
                    let col = j + 2 - i;
                    if col < 5 {
                        a[i][col] -= l * a[k][j + 2 - k];
                    }
                }
            }
        }
        Ok(BandLu { n, a })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            for off in 1..=2 {
                if i >= off {
                    y[i] -= self.a[i][2 - off] * y[i - off];
                }
            }
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for off in 1..=2 {
                if i + off < n {
                    s -= self.a[i][2 + off] * y[i + off];
                }
            }
            y[i] = s / self.a[i][2];
        }
        y
    }
}

fn solve_small(mut m: [[f64; 4]; 4], mut v: [f64; 4]) -> Result<[f64; 4]> {
    for c in 0..4 {
        let p = (c..4)
            .max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs()))
            .unwrap();
        if m[p][c] == 0.0 {
            return Err(Error::SolverBreakdown("singular periodic capacitance matrix".into()));
        }
        m.swap(c, p);
        v.swap(c, p);
        for r in (c + 1)..4 {
            let f = m[r][c] / m[c][c];
            for k in c..4 {
                m[r][k] -= f * m[c][k];
            }
            v[r] -= f * v[c];
        }
    }
    let mut x = [0.0; 4];
    for r in (0..4).rev() {
        let mut s = v[r];
        for k in (r + 1)..4 {
            s -= m[r][k] * x[k];
        }
        x[r] = s / m[r][r];
    }
    Ok(x)
}

/// Periodic pentadiagonal solve `(-δ D₄² + diag ρ) u = rhs` with the FD4
/// second-derivative stencil.
fn solve_banded(prob: &EllipticProblem, grid: &Grid) -> Result<Field> {
    let n = grid.n();
    let h2 = grid.h() * grid.h();
    let s = prob.delta / (12.0 * h2);
    // -δ × stencil (-1, 16, -30, 16, -1) / (12h²)
    let (c0, c1, c2) = (30.0 * s, -16.0 * s, s);
    let rho = prob.rho.values();
    let band: Vec<[f64; 5]> = (0..n)
        .map(|i| {
            let mut row = [c2, c1, c0 + rho[i], c1, c2];
            if i < 2 {
                for k in 0..(2 - i) {
                    row[k] = 0.0;
                }
            }
            if i + 2 >= n {
                for k in (n - i + 2)..5 {
                    row[k] = 0.0;
                }
            }
            row
        })
        .collect();
    let lu = BandLu::factor(band)?;
    let idx = [0, 1, n - 2, n - 1];
    // Corner couplings dropped from the band, on the index set above.
    let mut e = [[0.0; 4]; 4];
    e[0][3] = c1;
    e[3][0] = c1;
    e[0][2] = c2;
    e[2][0] = c2;
    e[1][3] = c2;
    e[3][1] = c2;

    let y = lu.solve(prob.rhs.values());
    let z: Vec<Vec<f64>> = idx
        .iter()
        .map(|&k| {
            let mut unit = vec![0.0; n];
            unit[k] = 1.0;
            lu.solve(&unit)
        })
        .collect();
    // (I + E Uᵀ Z) w = E Uᵀ y
    let mut m = [[0.0; 4]; 4];
    let mut v = [0.0; 4];
    for a in 0..4 {
        for b in 0..4 {
            let mut acc = if a == b { 1.0 } else { 0.0 };
            for c in 0..4 {
                acc += e[a][c] * z[b][idx[c]];
            }
            m[a][b] = acc;
        }
        v[a] = (0..4).map(|c| e[a][c] * y[idx[c]]).sum();
    }
    let w = solve_small(m, v)?;
    let u: Vec<f64> = (0..n)
        .map(|i| y[i] - (0..4).map(|b| z[b][i] * w[b]).sum::<f64>())
        .collect();
    Ok(Field::from_vec(&prob.rho.grid().clone(), u))
}
