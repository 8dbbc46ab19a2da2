//! Uniform periodic grid on the torus `[0, L)` and real grid functions.
//!
//! Two differentiation backends share one interface:
//! - `Spectral`: Fourier multipliers `(ik)^m`. The Nyquist mode is dropped
//!   for every derivative order, so `dxx == dx ∘ dx` and `dx` is exactly
//!   skew-adjoint for the rectangle quadrature.
//! - `Fd4`: fourth-order centered stencils on 5 points.
//!
//! Quadrature is `h Σ f_i` for both.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_POINTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Spectral,
    Fd4,
}

impl Backend {
    pub fn as_str(&self) -> &'static str {
        match self {
            Backend::Spectral => "spectral",
            Backend::Fd4 => "fd4",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Backend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "spectral" => Ok(Backend::Spectral),
            "fd4" => Ok(Backend::Fd4),
            other => Err(Error::Config(format!("unknown backend '{other}'"))),
        }
    }
}

pub struct Grid {
    n: usize,
    length: f64,
    h: f64,
    backend: Backend,
    dealias: bool,
    chop: Option<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("n", &self.n)
            .field("length", &self.length)
            .field("backend", &self.backend)
            .field("dealias", &self.dealias)
            .field("chop", &self.chop)
            .finish()
    }
}

impl Grid {
    /// `n ≥ 16` points on a torus of period `length`; spectral grids need a
    /// power of two.
    pub fn new(n: usize, length: f64, backend: Backend) -> Result<Arc<Grid>> {
        Self::build(n, length, backend, false, None)
    }

    /// Unit torus, spectral backend.
    pub fn unit(n: usize) -> Result<Arc<Grid>> {
        Self::new(n, 1.0, Backend::Spectral)
    }

    /// Same mesh with 2/3-rule truncation applied after each spectral derivative.
    pub fn with_dealias(&self, on: bool) -> Result<Arc<Grid>> {
        Self::build(self.n, self.length, self.backend, on, self.chop)
    }

    /// Same mesh with Fourier coefficients below `rel · max|ĉ|` discarded
    /// before spectral differentiation. Keeps round-off in high derivatives
    /// from being amplified by `|k|^m`.
    pub fn with_chop(&self, rel: Option<f64>) -> Result<Arc<Grid>> {
        if let Some(r) = rel {
            if !(r >= 0.0 && r < 1.0) {
                return Err(Error::Domain(format!("chop threshold must lie in [0, 1), got {r}")));
            }
        }
        Self::build(self.n, self.length, self.backend, self.dealias, rel)
    }

    fn build(
        n: usize,
        length: f64,
        backend: Backend,
        dealias: bool,
        chop: Option<f64>,
    ) -> Result<Arc<Grid>> {
        if n < MIN_POINTS {
            return Err(Error::Domain(format!("grid needs n >= {MIN_POINTS}, got {n}")));
        }
        if backend == Backend::Spectral && !n.is_power_of_two() {
            return Err(Error::Domain(format!("spectral grid needs a power of two, got n = {n}")));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::Domain(format!("torus length must be positive, got {length}")));
        }
        let mut planner = FftPlanner::new();
        Ok(Arc::new(Grid {
            n,
            length,
            h: length / n as f64,
            backend,
            dealias,
            chop,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }))
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn length(&self) -> f64 {
        self.length
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn backend(&self) -> Backend {
        self.backend
    }
    pub fn dealias(&self) -> bool {
        self.dealias
    }
    pub fn chop(&self) -> Option<f64> {
        self.chop
    }

    /// Node coordinates `x_i = i h`.
    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| i as f64 * self.h).collect()
    }

    /// Signed mode index of FFT slot `j`, in `(-n/2, n/2]`.
    pub fn mode(&self, j: usize) -> i64 {
        let n = self.n as i64;
        let j = j as i64;
        if j <= n / 2 {
            j
        } else {
            j - n
        }
    }

    fn is_nyquist(&self, j: usize) -> bool {
        self.n % 2 == 0 && j == self.n / 2
    }

    /// Angular wavenumber `2π m / L` of slot `j`, zero at Nyquist.
    pub fn wavenumber(&self, j: usize) -> f64 {
        if self.is_nyquist(j) {
            0.0
        } else {
            2.0 * std::f64::consts::PI * self.mode(j) as f64 / self.length
        }
    }

    /// Eigenvalue of the discrete first derivative on mode `j` divided by `i`.
    pub fn dx_symbol(&self, j: usize) -> f64 {
        match self.backend {
            Backend::Spectral => self.wavenumber(j),
            Backend::Fd4 => {
                let kh = 2.0 * std::f64::consts::PI * self.mode(j) as f64 / self.n as f64;
                (8.0 * kh.sin() - (2.0 * kh).sin()) / (6.0 * self.h)
            }
        }
    }

    /// Eigenvalue (real, ≤ 0) of the discrete second derivative on mode `j`.
    pub fn dxx_symbol(&self, j: usize) -> f64 {
        match self.backend {
            Backend::Spectral => {
                let k = self.wavenumber(j);
                -k * k
            }
            Backend::Fd4 => {
                let kh = 2.0 * std::f64::consts::PI * self.mode(j) as f64 / self.n as f64;
                (-2.0 * (2.0 * kh).cos() + 32.0 * kh.cos() - 30.0) / (12.0 * self.h * self.h)
            }
        }
    }

    /// `max_j |dx_symbol(j)| · h`: π-ish for spectral, about 1.372 for FD4.
    pub fn dx_symbol_scale(&self) -> f64 {
        (0..self.n)
            .map(|j| self.dx_symbol(j).abs())
            .fold(0.0, f64::max)
            * self.h
    }

    /// Fourth-order stiffness constant `c₄ = (max|dx symbol| h)⁴`.
    pub fn c4(&self) -> f64 {
        self.dx_symbol_scale().powi(4)
    }

    pub(crate) fn fft(&self, values: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        buf
    }

    pub(crate) fn ifft_real(&self, mut buf: Vec<Complex64>) -> Vec<f64> {
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.n as f64;
        buf.into_iter().map(|c| c.re * scale).collect()
    }

    fn chop_spectrum(&self, spec: &mut [Complex64]) {
        if let Some(rel) = self.chop {
            let peak = spec.iter().map(|c| c.norm()).fold(0.0, f64::max);
            let cut = rel * peak;
            for c in spec.iter_mut() {
                if c.norm() < cut {
                    *c = Complex64::new(0.0, 0.0);
                }
            }
        }
    }

    fn dealias_spectrum(&self, spec: &mut [Complex64]) {
        if self.dealias {
            let cutoff = self.n as i64 / 3;
            for (j, c) in spec.iter_mut().enumerate() {
                if self.mode(j).abs() > cutoff {
                    *c = Complex64::new(0.0, 0.0);
                }
            }
        }
    }

    /// Applies the real Fourier multiplier `m(j)` (any backend).
    pub fn apply_multiplier(&self, values: &[f64], m: impl Fn(usize) -> f64) -> Vec<f64> {
        let mut spec = self.fft(values);
        for (j, c) in spec.iter_mut().enumerate() {
            *c *= m(j);
        }
        self.ifft_real(spec)
    }

    fn spectral_derivative(&self, values: &[f64], order: u32) -> Vec<f64> {
        let mut spec = self.fft(values);
        self.chop_spectrum(&mut spec);
        let i = Complex64::new(0.0, 1.0);
        for (j, c) in spec.iter_mut().enumerate() {
            let k = self.wavenumber(j);
            *c *= (i * k).powu(order);
        }
        self.dealias_spectrum(&mut spec);
        self.ifft_real(spec)
    }

    fn fd4_dx(&self, f: &[f64]) -> Vec<f64> {
        let n = self.n;
        let s = 1.0 / (12.0 * self.h);
        (0..n)
            .map(|i| {
                let p1 = f[(i + 1) % n];
                let p2 = f[(i + 2) % n];
                let m1 = f[(i + n - 1) % n];
                let m2 = f[(i + n - 2) % n];
                (-p2 + 8.0 * p1 - 8.0 * m1 + m2) * s
            })
            .collect()
    }

    fn fd4_dxx(&self, f: &[f64]) -> Vec<f64> {
        let n = self.n;
        let s = 1.0 / (12.0 * self.h * self.h);
        (0..n)
            .map(|i| {
                let p1 = f[(i + 1) % n];
                let p2 = f[(i + 2) % n];
                let m1 = f[(i + n - 1) % n];
                let m2 = f[(i + n - 2) % n];
                (-p2 + 16.0 * p1 - 30.0 * f[i] + 16.0 * m1 - m2) * s
            })
            .collect()
    }

    pub(crate) fn dx_raw(&self, f: &[f64]) -> Vec<f64> {
        match self.backend {
            Backend::Spectral => self.spectral_derivative(f, 1),
            Backend::Fd4 => self.fd4_dx(f),
        }
    }

    pub(crate) fn dxx_raw(&self, f: &[f64]) -> Vec<f64> {
        match self.backend {
            Backend::Spectral => self.spectral_derivative(f, 2),
            Backend::Fd4 => self.fd4_dxx(f),
        }
    }

    pub(crate) fn integrate_raw(&self, f: &[f64]) -> f64 {
        self.h * f.iter().sum::<f64>()
    }
}

/// A real grid function tied to its grid.
#[derive(Clone)]
pub struct Field {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl fmt::Debug for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Field")
            .field("n", &self.grid.n)
            .field("values", &self.values)
            .finish()
    }
}

impl PartialEq for Field {
    fn eq(&self, other: &Self) -> bool {
        self.values == other.values
    }
}

impl Field {
    /// Checks length and finiteness.
    pub fn new(grid: &Arc<Grid>, values: Vec<f64>) -> Result<Field> {
        if values.len() != grid.n {
            return Err(Error::Domain(format!(
                "field has {} values but the grid has {} points",
                values.len(),
                grid.n
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite value {} at node {i}", values[i])));
        }
        Ok(Field { grid: grid.clone(), values })
    }

    pub(crate) fn from_vec(grid: &Arc<Grid>, values: Vec<f64>) -> Field {
        debug_assert_eq!(values.len(), grid.n);
        Field { grid: grid.clone(), values }
    }

    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn(f64) -> f64) -> Field {
        Field::from_vec(grid, grid.nodes().into_iter().map(f).collect())
    }

    pub fn constant(grid: &Arc<Grid>, c: f64) -> Field {
        Field::from_vec(grid, vec![c; grid.n])
    }

    pub fn zeros(grid: &Arc<Grid>) -> Field {
        Self::constant(grid, 0.0)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dx(&self) -> Field {
        Field::from_vec(&self.grid, self.grid.dx_raw(&self.values))
    }

    pub fn dxx(&self) -> Field {
        Field::from_vec(&self.grid, self.grid.dxx_raw(&self.values))
    }

    pub fn integrate(&self) -> f64 {
        self.grid.integrate_raw(&self.values)
    }

    pub fn mean(&self) -> f64 {
        self.integrate() / self.grid.length
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field::from_vec(&self.grid, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        debug_assert_eq!(self.len(), other.len());
        Field::from_vec(
            &self.grid,
            self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn scale(&self, c: f64) -> Field {
        self.map(|v| v * c)
    }

    /// `self + c · other`.
    pub fn axpy(&self, c: f64, other: &Field) -> Field {
        self.zip_map(other, |a, b| a + c * b)
    }

    pub fn dot(&self, other: &Field) -> f64 {
        self.grid.h * self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum::<f64>()
    }

    /// First node at or below `floor`, or a NaN node.
    pub fn first_below(&self, floor: f64) -> Option<(usize, f64)> {
        self.values
            .iter()
            .enumerate()
            .find(|(_, v)| v.is_nan() || **v < floor)
            .map(|(i, v)| (i, *v))
    }

    /// Fails with [`Error::Vacuum`] on the first node below `floor`.
    pub fn check_positive(&self, floor: f64) -> Result<()> {
        match self.first_below(floor) {
            Some((index, value)) => Err(Error::Vacuum { index, value }),
            None if floor <= 0.0 => match self.values.iter().position(|v| *v <= 0.0) {
                Some(index) => Err(Error::Vacuum { index, value: self.values[index] }),
                None => Ok(()),
            },
            None => Ok(()),
        }
    }

    /// Pointwise `f^p`, all values must be positive.
    pub fn power(&self, p: f64) -> Result<Field> {
        self.check_positive(0.0)?;
        Ok(self.map(|v| (p * v.ln()).exp()))
    }

    /// Pointwise `ln f`, all values must be positive.
    pub fn ln(&self) -> Result<Field> {
        self.check_positive(0.0)?;
        Ok(self.map(f64::ln))
    }

    /// Applies the 2/3-rule projection.
    pub fn dealiased(&self) -> Field {
        let mut spec = self.grid.fft(&self.values);
        let cutoff = self.grid.n as i64 / 3;
        for (j, c) in spec.iter_mut().enumerate() {
            if self.grid.mode(j).abs() > cutoff {
                *c = Complex64::new(0.0, 0.0);
            }
        }
        Field::from_vec(&self.grid, self.grid.ifft_real(spec))
    }
}

/// Periodic first derivative.
pub fn dx(f: &Field) -> Field {
    f.dx()
}

/// Periodic second derivative.
pub fn dxx(f: &Field) -> Field {
    f.dxx()
}

/// `h Σ f_i`.
pub fn integrate(f: &Field) -> f64 {
    f.integrate()
}

/// Pointwise power; a nonpositive node is a [`Error::Vacuum`] carrying its index.
pub fn power_field(f: &Field, p: f64) -> Result<Field> {
    f.power(p)
}

pub fn log_field(f: &Field) -> Result<Field> {
    f.ln()
}

macro_rules! field_binop {
    ($trait:ident, $method:ident, $op:tt) => {
        impl $trait<&Field> for &Field {
            type Output = Field;
            fn $method(self, rhs: &Field) -> Field {
                self.zip_map(rhs, |a, b| a $op b)
            }
        }
        impl $trait<Field> for Field {
            type Output = Field;
            fn $method(self, rhs: Field) -> Field {
                (&self).$method(&rhs)
            }
        }
        impl $trait<&Field> for Field {
            type Output = Field;
            fn $method(self, rhs: &Field) -> Field {
                (&self).$method(rhs)
            }
        }
        impl $trait<f64> for &Field {
            type Output = Field;
            fn $method(self, rhs: f64) -> Field {
                self.map(|a| a $op rhs)
            }
        }
        impl $trait<f64> for Field {
            type Output = Field;
            fn $method(self, rhs: f64) -> Field {
                (&self).$method(rhs)
            }
        }
    };
}

field_binop!(Add, add, +);
field_binop!(Sub, sub, -);
field_binop!(Mul, mul, *);

impl Neg for &Field {
    type Output = Field;
    fn neg(self) -> Field {
        self.map(|v| -v)
    }
}

impl Neg for Field {
    type Output = Field;
    fn neg(self) -> Field {
        -&self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn construction_rules() {
        assert!(Grid::new(8, 1.0, Backend::Spectral).is_err());
        assert!(Grid::new(48, 1.0, Backend::Spectral).is_err());
        assert!(Grid::new(48, 1.0, Backend::Fd4).is_ok());
        assert!(Grid::new(64, 0.0, Backend::Spectral).is_err());
        let g = Grid::new(64, 2.5, Backend::Spectral).unwrap();
        assert!((g.h() * g.n() as f64 - 2.5).abs() < 1e-15);
        assert!(Field::new(&g, vec![0.0; 63]).is_err());
        let mut v = vec![0.0; 64];
        v[3] = f64::NAN;
        assert!(Field::new(&g, v).is_err());
    }

    #[test]
    fn constants_in_kernel() {
        for b in [Backend::Spectral, Backend::Fd4] {
            let g = Grid::new(32, 1.0, b).unwrap();
            let f = Field::constant(&g, 3.7);
            assert!(f.dx().max_abs() < 1e-13);
            assert!(f.dxx().max_abs() < 1e-11);
        }
    }

    #[test]
    fn spectral_sine_derivative() {
        for l in [1.0, 3.0] {
            let g = Grid::new(64, l, Backend::Spectral).unwrap();
            let w = 2.0 * PI / l;
            let f = Field::from_fn(&g, |x| (w * x).sin());
            let exact = Field::from_fn(&g, |x| w * (w * x).cos());
            assert!((&f.dx() - &exact).max_abs() < 1e-12);
            let exact2 = Field::from_fn(&g, |x| -w * w * (w * x).sin());
            assert!((&f.dxx() - &exact2).max_abs() < 1e-10);
        }
    }

    #[test]
    fn fd4_refinement_order() {
        let err = |n: usize| {
            let g = Grid::new(n, 1.0, Backend::Fd4).unwrap();
            let f = Field::from_fn(&g, |x| (2.0 * PI * x).sin());
            let exact = Field::from_fn(&g, |x| 2.0 * PI * (2.0 * PI * x).cos());
            (&f.dx() - &exact).max_abs()
        };
        let ratio = err(64) / err(128);
        assert!((ratio - 16.0).abs() < 0.2 * 16.0, "ratio {ratio}");
    }

    #[test]
    fn fd4_symbols_match_stencils() {
        let g = Grid::new(32, 1.0, Backend::Fd4).unwrap();
        for m in [1usize, 5, 11] {
            let w = 2.0 * PI * m as f64;
            let f = Field::from_fn(&g, |x| (w * x).sin());
            let d = f.dx();
            let expect = Field::from_fn(&g, |x| g.dx_symbol(m) * (w * x).cos());
            assert!((&d - &expect).max_abs() < 1e-10);
            let d2 = f.dxx();
            let expect2 = Field::from_fn(&g, |x| g.dxx_symbol(m) * (w * x).sin());
            assert!((&d2 - &expect2).max_abs() < 1e-8);
        }
        assert!((g.dx_symbol_scale() - 1.3722).abs() < 1e-3);
    }

    #[test]
    fn integrals() {
        let g = Grid::unit(64).unwrap();
        assert!((Field::constant(&g, 1.0).integrate() - 1.0).abs() < 1e-15);
        let f = Field::from_fn(&g, |x| 2.0 + (2.0 * PI * x).cos());
        assert!((f.integrate() - 2.0).abs() < 1e-13);
        let h = Field::from_fn(&g, |x| (x * 7.0).sin().exp());
        assert!(h.dx().integrate().abs() < 1e-13);
    }

    #[test]
    fn powers_and_logs() {
        let g = Grid::unit(16).unwrap();
        let f = Field::from_fn(&g, |x| 1.5 + x);
        let one = f.power(1.0).unwrap();
        assert!((&one - &f).max_abs() < 1e-14);
        assert!(f.power(0.0).unwrap().values().iter().all(|&v| v == 1.0));
        let four = Field::constant(&g, 4.0);
        assert!((four.power(0.5).unwrap().max() - 2.0).abs() < 1e-15);
        let mut v = f.clone().into_values();
        v[5] = -1.0;
        let bad = Field::new(&g, v).unwrap();
        match bad.power(0.5) {
            Err(Error::Vacuum { index, .. }) => assert_eq!(index, 5),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(bad.ln(), Err(Error::Vacuum { index: 5, .. })));
    }

    #[test]
    fn spectral_dxx_is_dx_dx() {
        let g = Grid::unit(64).unwrap();
        let f = Field::from_fn(&g, |x| (0.4 * (2.0 * PI * x).sin()).exp() + (6.0 * PI * x).cos());
        let a = f.dxx();
        let b = f.dx().dx();
        assert!((&a - &b).max_abs() <= 1e-12 * a.max_abs());
    }

    #[test]
    fn dealias_projection() {
        let g = Grid::unit(32).unwrap();
        let f = Field::from_fn(&g, |x| (2.0 * PI * x).sin() + (2.0 * PI * 15.0 * x).cos());
        let d = f.dealiased();
        let low = Field::from_fn(&g, |x| (2.0 * PI * x).sin());
        assert!((&d - &low).max_abs() < 1e-13);
    }
}
