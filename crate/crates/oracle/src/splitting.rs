//! Adapted-basis predictions for a `k`-pair `{f cos kθ, f sin kθ}` under
//! perturbations carrying the angular harmonic `cos k_p θ`.
//!
//! The angular integrals are closed form; the radial factor is a 1D
//! Gauss–Legendre quadrature of the (a-normalized) radial profile.

use std::f64::consts::PI;

use crate::quad::integrate;
use crate::radial::{AnnulusMode, OracleVariant};
use crate::{OracleError, Result};

/// `∫₀^{2π} cos(k_p θ) cos²(kθ) dθ` and the `sin²` counterpart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngularFactors {
    pub cos_factor: f64,
    pub sin_factor: f64,
}

impl AngularFactors {
    /// Half the difference of the two factors: the part that splits the pair.
    pub fn split(&self) -> f64 {
        0.5 * (self.cos_factor - self.sin_factor)
    }
}

pub fn annulus_splitting_factors(mode: &AnnulusMode, k_p: usize) -> Result<AngularFactors> {
    if mode.k == 0 {
        return Err(OracleError::NotApplicable(
            "k = 0 modes are simple; there is no pair to split".into(),
        ));
    }
    let mean = if k_p == 0 { PI } else { 0.0 };
    let split = if k_p == 2 * mode.k { PI / 2.0 } else { 0.0 };
    Ok(AngularFactors {
        cos_factor: mean + split,
        sin_factor: mean - split,
    })
}

const PANELS: usize = 64;
const ORDER: usize = 8;

/// Normalized profile `(f, f')` such that the cos-mode has unit energy in
/// the variant's inner product.
fn normalized(mode: &AnnulusMode) -> impl Fn(f64) -> (f64, f64) + '_ {
    let k2 = (mode.k * mode.k) as f64;
    let (r0, r1) = (mode.r0, mode.r1);
    let energy = match mode.variant {
        OracleVariant::Harmonic => {
            let vol = integrate(
                |r| {
                    let (f, d) = mode.profile(r);
                    (d * d + k2 * f * f / (r * r)) * r
                },
                r0,
                r1,
                PANELS,
                ORDER,
            );
            let (f0, _) = mode.profile(r0);
            let (f1, _) = mode.profile(r1);
            vol + r0 * f0 * f0 + r1 * f1 * f1
        }
        OracleVariant::Massive => integrate(
            |r| {
                let (f, d) = mode.profile(r);
                (d * d + k2 * f * f / (r * r) + f * f) * r
            },
            r0,
            r1,
            PANELS,
            ORDER,
        ),
    };
    // angular factor ∫cos² = π (k ≥ 1); the k = 0 profile uses 2π
    let angular = if mode.k == 0 { 2.0 * PI } else { PI };
    let scale = 1.0 / (angular * energy).sqrt();
    move |r| {
        let (f, d) = mode.profile(r);
        (scale * f, scale * d)
    }
}

/// Cos-cos entry of the shape perturbation matrix `M = G - μ (dK + dMass)`
/// for the field `ψ = η(r) cos(2kθ) r̂`; the sin-sin entry is its negative
/// and the off-diagonal vanishes. `eta(r)` returns `(η, η')`.
pub fn shape_split(mode: &AnnulusMode, eta: impl Fn(f64) -> (f64, f64)) -> Result<f64> {
    if mode.k == 0 {
        return Err(OracleError::NotApplicable("k = 0".into()));
    }
    let f = normalized(mode);
    let k2 = (mode.k * mode.k) as f64;
    let half_pi = PI / 2.0;
    let (r0, r1) = (mode.r0, mode.r1);
    let d_stiff = half_pi
        * integrate(
            |r| {
                let (u, du) = f(r);
                let (e, de) = eta(r);
                let r2 = r * r;
                ((de + e / r) * (du * du - k2 * u * u / r2) - 2.0 * du * du * de
                    - 4.0 * k2 * u * du * e / r2
                    + 2.0 * k2 * u * u * e / (r2 * r))
                    * r
            },
            r0,
            r1,
            PANELS,
            ORDER,
        );
    let (f1, _) = f(r1);
    let (f0, _) = f(r0);
    let g = half_pi * f1 * f1 * eta(r1).0;
    let d_mass = match mode.variant {
        OracleVariant::Harmonic => g + half_pi * f0 * f0 * eta(r0).0,
        OracleVariant::Massive => {
            half_pi
                * integrate(
                    |r| {
                        let (u, _) = f(r);
                        let (e, de) = eta(r);
                        u * u * (de + e / r) * r
                    },
                    r0,
                    r1,
                    PANELS,
                    ORDER,
                )
        }
    };
    Ok(g - (d_stiff + d_mass) / mode.lambda)
}

/// Cos-cos entry for the boundary potential `b = cos(2kθ)` on both circles.
pub fn boundary_potential_split(mode: &AnnulusMode) -> Result<f64> {
    if mode.k == 0 {
        return Err(OracleError::NotApplicable("k = 0".into()));
    }
    let f = normalized(mode);
    let (f0, _) = f(mode.r0);
    let (f1, _) = f(mode.r1);
    Ok(-(PI / 2.0) * (mode.r1 * f1 * f1 + mode.r0 * f0 * f0) / mode.lambda)
}

/// Cos-cos entry for the volume potential `b = cos(2kθ)`.
pub fn volume_potential_split(mode: &AnnulusMode) -> Result<f64> {
    if mode.k == 0 {
        return Err(OracleError::NotApplicable("k = 0".into()));
    }
    let f = normalized(mode);
    let radial = integrate(|r| f(r).0.powi(2) * r, mode.r0, mode.r1, PANELS, ORDER);
    Ok(-(PI / 2.0) * radial / mode.lambda)
}

/// Cos-cos entry for the matrix coefficient `B = cos(2kθ) I`.
pub fn isotropic_conductivity_split(mode: &AnnulusMode) -> Result<f64> {
    if mode.k == 0 {
        return Err(OracleError::NotApplicable("k = 0".into()));
    }
    let f = normalized(mode);
    let k2 = (mode.k * mode.k) as f64;
    let radial = integrate(
        |r| {
            let (u, du) = f(r);
            (du * du - k2 * u * u / (r * r)) * r
        },
        mode.r0,
        mode.r1,
        PANELS,
        ORDER,
    );
    Ok(-(PI / 2.0) * radial / mode.lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radial::annulus_modes_p1;

    #[test]
    fn factors_select_double_harmonic() {
        let modes = annulus_modes_p1(0.5, 1.0, 3).unwrap();
        let f = annulus_splitting_factors(&modes[1], 2).unwrap();
        assert_eq!((f.cos_factor, f.sin_factor), (PI / 2.0, -PI / 2.0));
        let f = annulus_splitting_factors(&modes[2], 2).unwrap();
        assert_eq!(f.split(), 0.0);
        let f = annulus_splitting_factors(&modes[3], 6).unwrap();
        assert_eq!(f.split(), PI / 2.0);
        let f = annulus_splitting_factors(&modes[1], 0).unwrap();
        assert_eq!(f.split(), 0.0);
        assert!(annulus_splitting_factors(&modes[0], 2).is_err());
    }

    #[test]
    fn angular_factor_matches_quadrature() {
        let n = 4096;
        let q: f64 = (0..n)
            .map(|i| {
                let t = 2.0 * PI * (i as f64 + 0.5) / n as f64;
                (2.0 * t).cos() * t.cos().powi(2)
            })
            .sum::<f64>()
            * 2.0
            * PI
            / n as f64;
        assert!((q - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn boundary_potential_equals_minus_mu_times_boundary_energy_share() {
        // b ≡ 1 (k_p = 0) would give -μ·(boundary share); the cos 2kθ split is half of it
        let modes = annulus_modes_p1(0.5, 1.0, 2).unwrap();
        let s = boundary_potential_split(&modes[1]).unwrap();
        assert!(s < 0.0);
        assert!(s.abs() < 1.0 / modes[1].lambda);
    }
}
