//! Solver and verification lab for the periodic 1D fourth-order flows
//!
//! ```text
//! ∂t ρ + ∂x(ρ ∂x(∂x(κ(ρ) ∂x ρ) - κ'(ρ)/2 |∂x ρ|²)) = 0,   κ(ρ) = ρ^β,  β > -3,
//! ```
//!
//! the Wasserstein gradient flows of the Korteweg energy `∫κ(ρ)|∂xρ|²/2`.
//! β = 0 is the thin-film equation and β = -1 the quantum drift-diffusion
//! equation.

pub mod coefficients;
pub mod elliptic;
pub mod error;
pub mod evolution;
pub mod functionals;
pub mod grid;
pub mod identity_lab;

pub use coefficients::Params;
pub use error::{Error, Result};
pub use grid::{Backend, Field, Grid};
