//! Separation-of-variables oracles for the mixed Steklov problems on an annulus
//! `r0 < |x| < r1`, with the spectral (Steklov) condition on the outer circle
//! and the Robin/Neumann condition on the inner circle.
//!
//! This crate is deliberately mesh-free and shares no code with the finite
//! element crate: it exists to check that crate from the outside.
//!
//! Two variants are covered:
//!
//! * harmonic (`-Δu = 0`, `∂ν u + u = λ d u`): closed form,
//!   `u = (α r^k + β r^-k) cos kθ`, or `α + β log r` for `k = 0`;
//! * massive (`-Δu + u = 0`, `∂ν u = λ d u`): the radial ODE
//!   `u'' + u'/r - (1 + k²/r²) u = 0` is integrated numerically.

pub mod quad;
pub mod radial;
pub mod splitting;

pub use radial::{annulus_modes_p1, annulus_modes_p2, AnnulusMode, OracleVariant};
pub use splitting::{annulus_splitting_factors, AngularFactors};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("radial integrator did not reach tolerance {tol:e} (last relative change {change:e})")]
    Integrator { tol: f64, change: f64 },
    #[error("not applicable: {0}")]
    NotApplicable(String),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// Expands modes by multiplicity and returns the `count` smallest eigenvalues
/// in ascending order (flagged modes are skipped).
pub fn sorted_spectrum(modes: &[AnnulusMode], count: usize) -> Vec<f64> {
    let mut all: Vec<f64> = modes
        .iter()
        .filter(|m| !m.flagged)
        .flat_map(|m| std::iter::repeat_n(m.lambda, m.multiplicity))
        .collect();
    all.sort_by(|a, b| a.total_cmp(b));
    all.truncate(count);
    all
}

/// Smallest `k0` such that λ is strictly increasing in `k` for all computed
/// `k ≥ k0`. `None` when the list is empty.
pub fn monotonicity_onset(modes: &[AnnulusMode]) -> Option<usize> {
    if modes.is_empty() {
        return None;
    }
    let mut onset = modes.len() - 1;
    while onset > 0 && modes[onset - 1].lambda < modes[onset].lambda {
        onset -= 1;
    }
    Some(modes[onset].k)
}

/// Oracle table as comma-separated text: `variant,k,lambda,multiplicity`.
pub fn oracle_table_csv(modes: &[AnnulusMode]) -> String {
    let mut out = String::from("variant,k,lambda,multiplicity\n");
    for m in modes {
        out.push_str(&format!(
            "{},{},{:.15e},{}\n",
            m.variant.label(),
            m.k,
            m.lambda,
            m.multiplicity
        ));
    }
    out
}
