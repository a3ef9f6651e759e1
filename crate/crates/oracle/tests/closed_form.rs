use steklov_oracle::{annulus_modes_p1, annulus_modes_p2, sorted_spectrum, OracleError};

/// Harmonic eigenvalue for `(α r^k + β r^-k) cos kθ` (or `α + β log r`),
/// solved by hand from `-u' + u = 0` at `r0` and `u' + u = λu` at `r1`.
fn harmonic_lambda(r0: f64, r1: f64, k: usize) -> f64 {
    if k == 0 {
        let alpha = 1.0 / r0 - r0.ln();
        return 1.0 + (1.0 / r1) / (alpha + r1.ln());
    }
    let k = k as f64;
    let q = r0.powf(2.0 * k) * (k - r0) / (k + r0);
    1.0 + k * (r1.powf(k - 1.0) - q * r1.powf(-k - 1.0)) / (r1.powf(k) + q * r1.powf(-k))
}

#[test]
fn harmonic_modes_match_hand_solution() {
    for &(r0, r1) in &[(0.5, 1.0), (0.3, 1.0), (1.0, 2.5)] {
        let modes = annulus_modes_p1(r0, r1, 6).unwrap();
        assert_eq!(modes.len(), 7);
        for m in &modes {
            let expected = harmonic_lambda(r0, r1, m.k);
            assert!((m.lambda - expected).abs() < 1e-12 * expected, "k={} {} vs {expected}", m.k, m.lambda);
            assert_eq!(m.multiplicity, if m.k == 0 { 1 } else { 2 });
        }
    }
}

#[test]
fn reference_pair_is_24_over_13() {
    let modes = annulus_modes_p1(0.5, 1.0, 1).unwrap();
    assert!((modes[1].lambda - 24.0 / 13.0).abs() < 1e-14);
}

#[test]
fn massive_modes_satisfy_boundary_conditions() {
    let modes = annulus_modes_p2(0.5, 1.0, 5).unwrap();
    for m in &modes {
        let (inner, outer) = m.boundary_residuals();
        assert!(inner < 1e-8 && outer < 1e-8, "k={}: {inner:e} {outer:e}", m.k);
    }
    // adding ∫u² to the Dirichlet form raises every sector's λ above the
    // harmonic one with a Neumann inner circle, k(1 - r0^2k)/(1 + r0^2k)
    for m in &modes {
        let q = 0.5f64.powi(2 * m.k as i32);
        let neumann = m.k as f64 * (1.0 - q) / (1.0 + q);
        assert!(m.lambda > neumann, "k={}: {} <= {neumann}", m.k, m.lambda);
    }
}

#[test]
fn sorted_spectrum_expands_multiplicities() {
    let modes = annulus_modes_p1(0.5, 1.0, 4).unwrap();
    let s = sorted_spectrum(&modes, 5);
    assert_eq!(s.len(), 5);
    assert_eq!(s[1], s[2]);
    assert_eq!(s[3], s[4]);
    assert!(s.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn bad_radii_are_rejected() {
    assert!(matches!(annulus_modes_p1(1.0, 0.5, 2), Err(OracleError::Argument(_))));
    assert!(matches!(annulus_modes_p2(0.0, 1.0, 2), Err(OracleError::Argument(_))));
}
