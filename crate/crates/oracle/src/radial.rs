use crate::{OracleError, Result};

/// Which radial problem a mode belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleVariant {
    /// `-Δu = 0`, `∂ν u + u = λ u` on the outer circle, `∂ν u + u = 0` on the inner one.
    Harmonic,
    /// `-Δu + u = 0`, `∂ν u = λ u` on the outer circle, `∂ν u = 0` on the inner one.
    Massive,
}

impl OracleVariant {
    pub fn label(self) -> &'static str {
        match self {
            OracleVariant::Harmonic => "P1",
            OracleVariant::Massive => "P2",
        }
    }
}

#[derive(Debug, Clone)]
enum Profile {
    /// `α r^k + β r^-k` (or `α + β log r` for `k = 0`).
    Closed,
    /// RK4 samples of `(u, u')` on a uniform grid from `r0` to `r1`.
    Tabulated { r0: f64, h: f64, u: Vec<f64>, du: Vec<f64> },
}

/// One separated eigenmode `f(r) cos kθ` (and `f(r) sin kθ` for `k ≥ 1`).
#[derive(Debug, Clone)]
pub struct AnnulusMode {
    pub k: usize,
    pub lambda: f64,
    /// Closed-form profile coefficients for the harmonic variant; for the
    /// massive variant these are the initial data `u(r0)`, `u'(r0)`.
    pub alpha: f64,
    pub beta: f64,
    pub multiplicity: usize,
    pub variant: OracleVariant,
    pub r0: f64,
    pub r1: f64,
    /// Set when the profile vanishes on the outer circle and λ is undefined.
    pub flagged: bool,
    profile: Profile,
}

impl AnnulusMode {
    /// Unnormalized radial profile `(f(r), f'(r))` for `r ∈ [r0, r1]`.
    pub fn profile(&self, r: f64) -> (f64, f64) {
        let k = self.k as f64;
        match &self.profile {
            Profile::Closed if self.k == 0 => (self.alpha + self.beta * r.ln(), self.beta / r),
            Profile::Closed => (
                self.alpha * r.powf(k) + self.beta * r.powf(-k),
                k * (self.alpha * r.powf(k - 1.0) - self.beta * r.powf(-k - 1.0)),
            ),
            Profile::Tabulated { r0, h, u, du } => {
                let n = u.len() - 1;
                let s = ((r - r0) / h).clamp(0.0, n as f64);
                let i = (s.floor() as usize).min(n - 1);
                let t = s - i as f64;
                let ra = r0 + i as f64 * h;
                let rb = ra + h;
                let dda = massive_rhs(k, ra, u[i], du[i]);
                let ddb = massive_rhs(k, rb, u[i + 1], du[i + 1]);
                (
                    hermite(t, *h, u[i], du[i], u[i + 1], du[i + 1]),
                    hermite(t, *h, du[i], dda, du[i + 1], ddb),
                )
            }
        }
    }

    /// Relative residuals of the inner and outer boundary conditions.
    pub fn boundary_residuals(&self) -> (f64, f64) {
        let (u0, d0) = self.profile(self.r0);
        let (u1, d1) = self.profile(self.r1);
        match self.variant {
            OracleVariant::Harmonic => {
                let inner = (-d0 + u0).abs() / (d0.abs() + u0.abs());
                let outer = (d1 + u1 - self.lambda * u1).abs() / (d1.abs() + u1.abs());
                (inner, outer)
            }
            OracleVariant::Massive => {
                let inner = d0.abs() / (u0.abs() + 1.0);
                let outer = (d1 - self.lambda * u1).abs() / (d1.abs() + u1.abs());
                (inner, outer)
            }
        }
    }
}

fn hermite(t: f64, h: f64, ya: f64, da: f64, yb: f64, db: f64) -> f64 {
    let t2 = t * t;
    let t3 = t2 * t;
    (2.0 * t3 - 3.0 * t2 + 1.0) * ya
        + (t3 - 2.0 * t2 + t) * h * da
        + (-2.0 * t3 + 3.0 * t2) * yb
        + (t3 - t2) * h * db
}

fn check_radii(r0: f64, r1: f64) -> Result<()> {
    if !(r0 > 0.0 && r1 > r0 && r1.is_finite()) {
        return Err(OracleError::Argument(format!(
            "radii must satisfy 0 < r0 < r1 (got r0={r0}, r1={r1})"
        )));
    }
    Ok(())
}

/// Harmonic variant: closed-form modes `k = 0..=k_max`.
pub fn annulus_modes_p1(r0: f64, r1: f64, k_max: usize) -> Result<Vec<AnnulusMode>> {
    check_radii(r0, r1)?;
    let mut modes = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        // inner circle: outward normal is -r̂, so -u'(r0) + u(r0) = 0
        let (alpha, beta) = if k == 0 {
            (1.0 / r0 - r0.ln(), 1.0)
        } else {
            let kf = k as f64;
            let a = r0.powf(kf) - kf * r0.powf(kf - 1.0);
            let b = r0.powf(-kf) + kf * r0.powf(-kf - 1.0);
            (1.0, -a / b)
        };
        let mut mode = AnnulusMode {
            k,
            lambda: f64::NAN,
            alpha,
            beta,
            multiplicity: if k == 0 { 1 } else { 2 },
            variant: OracleVariant::Harmonic,
            r0,
            r1,
            flagged: false,
            profile: Profile::Closed,
        };
        let (u1, d1) = mode.profile(r1);
        if u1.abs() <= 1e-300 {
            mode.flagged = true;
        } else {
            mode.lambda = 1.0 + d1 / u1;
        }
        modes.push(mode);
    }
    Ok(modes)
}

fn massive_rhs(k: f64, r: f64, u: f64, du: f64) -> f64 {
    -du / r + (1.0 + k * k / (r * r)) * u
}

fn rk4_massive(k: f64, r0: f64, r1: f64, steps: usize) -> (Vec<f64>, Vec<f64>) {
    let h = (r1 - r0) / steps as f64;
    let mut u = Vec::with_capacity(steps + 1);
    let mut du = Vec::with_capacity(steps + 1);
    let (mut y, mut dy) = (1.0, 0.0);
    u.push(y);
    du.push(dy);
    for i in 0..steps {
        let r = r0 + i as f64 * h;
        let k1y = dy;
        let k1d = massive_rhs(k, r, y, dy);
        let k2y = dy + 0.5 * h * k1d;
        let k2d = massive_rhs(k, r + 0.5 * h, y + 0.5 * h * k1y, dy + 0.5 * h * k1d);
        let k3y = dy + 0.5 * h * k2d;
        let k3d = massive_rhs(k, r + 0.5 * h, y + 0.5 * h * k2y, dy + 0.5 * h * k2d);
        let k4y = dy + h * k3d;
        let k4d = massive_rhs(k, r + h, y + h * k3y, dy + h * k3d);
        y += h / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
        dy += h / 6.0 * (k1d + 2.0 * k2d + 2.0 * k3d + k4d);
        u.push(y);
        du.push(dy);
    }
    (u, du)
}

/// Relative change of λ between successive step halvings that the massive
/// oracle must reach.
pub const P2_STEP_HALVING_TOL: f64 = 1e-12;

/// Massive variant: λ from RK4 integration of the radial ODE with
/// `u(r0) = 1`, `u'(r0) = 0`, refined by step halving until λ is stable.
pub fn annulus_modes_p2(r0: f64, r1: f64, k_max: usize) -> Result<Vec<AnnulusMode>> {
    check_radii(r0, r1)?;
    (0..=k_max).map(|k| massive_mode(r0, r1, k)).collect()
}

fn massive_mode(r0: f64, r1: f64, k: usize) -> Result<AnnulusMode> {
    let kf = k as f64;
    let mut steps = 512;
    let (mut u, mut du) = rk4_massive(kf, r0, r1, steps);
    let mut lambda = du[steps] / u[steps];
    let mut change = f64::INFINITY;
    while steps < (1 << 20) {
        let fine = rk4_massive(kf, r0, r1, 2 * steps);
        let fine_lambda = fine.1[2 * steps] / fine.0[2 * steps];
        change = ((fine_lambda - lambda) / fine_lambda).abs();
        steps *= 2;
        u = fine.0;
        du = fine.1;
        lambda = fine_lambda;
        if change < P2_STEP_HALVING_TOL {
            break;
        }
    }
    if change >= P2_STEP_HALVING_TOL {
        return Err(OracleError::Integrator {
            tol: P2_STEP_HALVING_TOL,
            change,
        });
    }
    let flagged = u[steps].abs() <= 1e-300;
    Ok(AnnulusMode {
        k,
        lambda: if flagged { f64::NAN } else { lambda },
        alpha: 1.0,
        beta: 0.0,
        multiplicity: if k == 0 { 1 } else { 2 },
        variant: OracleVariant::Massive,
        r0,
        r1,
        flagged,
        profile: Profile::Tabulated {
            r0,
            h: (r1 - r0) / steps as f64,
            u,
            du,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multiplicities_are_one_then_two() {
        for modes in [
            annulus_modes_p1(0.5, 1.0, 5).unwrap(),
            annulus_modes_p2(0.5, 1.0, 5).unwrap(),
        ] {
            assert_eq!(modes[0].multiplicity, 1);
            assert!(modes[1..].iter().all(|m| m.multiplicity == 2));
        }
    }

    #[test]
    fn p1_k0_hand_value() {
        // u = α + log r, α = 1/r0 - ln r0 = 2 + ln 2; λ = 1 + 1/(α + ln 1)
        let m = &annulus_modes_p1(0.5, 1.0, 0).unwrap()[0];
        let expected = 1.0 + 1.0 / (2.0 + 2f64.ln());
        assert!((m.lambda - expected).abs() < 1e-15);
    }

    #[test]
    fn p1_k1_hand_value() {
        // k=1: α=1, β = -(r0 - 1)/(1/r0 + 1/r0²) = 0.5/6 = 1/12
        let m = &annulus_modes_p1(0.5, 1.0, 1).unwrap()[1];
        assert!((m.beta - 1.0 / 12.0).abs() < 1e-15);
        let expected = 1.0 + (1.0 - 1.0 / 12.0) / (1.0 + 1.0 / 12.0);
        assert!((m.lambda - expected).abs() < 1e-14);
    }

    #[test]
    fn boundary_conditions_hold() {
        for modes in [
            annulus_modes_p1(0.5, 1.0, 12).unwrap(),
            annulus_modes_p2(0.5, 1.0, 12).unwrap(),
        ] {
            for m in &modes {
                let (a, b) = m.boundary_residuals();
                assert!(a <= 1e-10 && b <= 1e-10, "k={} residuals {a:e} {b:e}", m.k);
            }
        }
    }

    #[test]
    fn p1_large_k_growth_is_near_linear() {
        let modes = annulus_modes_p1(0.5, 1.0, 40).unwrap();
        let slope = (modes[40].lambda - modes[20].lambda) / 20.0;
        assert!((slope - 1.0).abs() < 1e-3, "slope {slope}");
        assert!((modes[40].lambda / 40.0 - 1.0).abs() < 0.05);
    }

    #[test]
    fn p2_step_halving_is_converged() {
        let m = massive_mode(0.5, 1.0, 3).unwrap();
        let steps = match &m.profile {
            Profile::Tabulated { u, .. } => u.len() - 1,
            _ => unreachable!(),
        };
        let (u, du) = rk4_massive(3.0, 0.5, 1.0, steps / 2);
        let coarse = du[steps / 2] / u[steps / 2];
        assert!(((coarse - m.lambda) / m.lambda).abs() < 1e-8);
    }

    #[test]
    fn p2_profile_interpolation_matches_ode() {
        let m = massive_mode(0.5, 1.0, 2).unwrap();
        let (u, du) = m.profile(0.73);
        let (f, df) = rk4_massive(2.0, 0.5, 0.73, 20_000);
        assert!((u - f[20_000]).abs() < 1e-10 * u.abs());
        assert!((du - df[20_000]).abs() < 1e-9 * du.abs().max(1.0));
    }

    #[test]
    fn invalid_radii_rejected() {
        assert!(annulus_modes_p1(1.0, 1.0, 3).is_err());
        assert!(annulus_modes_p2(0.0, 1.0, 3).is_err());
    }
}
