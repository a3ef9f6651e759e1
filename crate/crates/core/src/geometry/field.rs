use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::mesh::{Mesh, Point, Tag};

pub type Mat2 = [[f64; 2]; 2];

/// Shape of a one-dimensional ramp on `u = (s - start) / (end - start)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Profile {
    /// Identically one, no cut-off.
    Unit,
    /// `u^p` for `u > 0`, zero below; C² for `p ≥ 3`.
    Power { p: f64 },
    /// `6u⁵ - 15u⁴ + 10u³` clamped to `[0, 1]`: flat at both ends.
    Smoothstep,
    /// `(4u(1 - u))³` on `[0, 1]`, zero outside.
    Hump,
    /// Parabola `u²` whose curvature is switched on linearly over `[0, knee]`,
    /// rescaled to one at `u = 1`. C² with curvature bounded by `2 / (1 - knee + knee²/3)`.
    Parabolic { knee: f64 },
}

impl Profile {
    /// Value and derivative with respect to `u`.
    fn eval(self, u: f64) -> (f64, f64) {
        match self {
            Profile::Unit => (1.0, 0.0),
            Profile::Power { p } => {
                if u <= 0.0 {
                    (0.0, 0.0)
                } else {
                    (u.powf(p), p * u.powf(p - 1.0))
                }
            }
            Profile::Smoothstep => {
                if u <= 0.0 {
                    (0.0, 0.0)
                } else if u >= 1.0 {
                    (1.0, 0.0)
                } else {
                    let u2 = u * u;
                    (
                        u2 * u * (10.0 - 15.0 * u + 6.0 * u2),
                        30.0 * u2 * (1.0 - u) * (1.0 - u),
                    )
                }
            }
            Profile::Parabolic { knee } => {
                let scale = 1.0 - knee + knee * knee / 3.0;
                if u <= 0.0 {
                    (0.0, 0.0)
                } else if u < knee {
                    (u * u * u / (3.0 * knee * scale), u * u / (knee * scale))
                } else {
                    (
                        (u * u - knee * u + knee * knee / 3.0) / scale,
                        (2.0 * u - knee) / scale,
                    )
                }
            }
            Profile::Hump => {
                if u <= 0.0 || u >= 1.0 {
                    (0.0, 0.0)
                } else {
                    let q = 4.0 * u * (1.0 - u);
                    (q * q * q, 3.0 * q * q * 4.0 * (1.0 - 2.0 * u))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Coordinate {
    /// Distance to a center point.
    Radius { center: Point },
    X,
    Y,
}

impl Coordinate {
    fn eval(self, x: Point) -> (f64, Point) {
        match self {
            Coordinate::Radius { center } => {
                let d = [x[0] - center[0], x[1] - center[1]];
                let r = d[0].hypot(d[1]);
                if r == 0.0 {
                    (0.0, [0.0, 0.0])
                } else {
                    (r, [d[0] / r, d[1] / r])
                }
            }
            Coordinate::X => (x[0], [1.0, 0.0]),
            Coordinate::Y => (x[1], [0.0, 1.0]),
        }
    }
}

/// A profile applied to one coordinate: `w(x) = profile((s(x) - start) / (end - start))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub coordinate: Coordinate,
    pub start: f64,
    pub end: f64,
    pub profile: Profile,
}

impl Window {
    pub fn unit() -> Self {
        Window {
            coordinate: Coordinate::X,
            start: 0.0,
            end: 1.0,
            profile: Profile::Unit,
        }
    }

    /// Value and gradient.
    pub fn eval(&self, x: Point) -> (f64, Point) {
        if self.profile == Profile::Unit {
            return (1.0, [0.0, 0.0]);
        }
        let (s, ds) = self.coordinate.eval(x);
        let len = self.end - self.start;
        let (w, dw) = self.profile.eval((s - self.start) / len);
        (w, [dw * ds[0] / len, dw * ds[1] / len])
    }
}

/// Scalar factor multiplying an axis field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Modulation {
    None,
    /// `cos(k(θ - phase))` about `center`.
    Angular { k: f64, phase: f64, center: Point },
    /// `cos(wave·x + phase)`.
    Planar { wave: Point, phase: f64 },
}

impl Modulation {
    fn eval(self, x: Point) -> (f64, Point) {
        match self {
            Modulation::None => (1.0, [0.0, 0.0]),
            Modulation::Angular { k, phase, center } => {
                let d = [x[0] - center[0], x[1] - center[1]];
                let r2 = d[0] * d[0] + d[1] * d[1];
                if r2 == 0.0 {
                    return (1.0, [0.0, 0.0]);
                }
                let th = d[1].atan2(d[0]);
                let arg = k * (th - phase);
                // ∇θ = (-y, x)/r²
                let s = -k * arg.sin();
                (arg.cos(), [s * -d[1] / r2, s * d[0] / r2])
            }
            Modulation::Planar { wave, phase } => {
                let arg = wave[0] * x[0] + wave[1] * x[1] + phase;
                let s = -arg.sin();
                (arg.cos(), [s * wave[0], s * wave[1]])
            }
        }
    }
}

/// Parametric displacement families; each evaluates its exact Jacobian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FieldSpec {
    Constant {
        value: Point,
    },
    /// `amplitude · (-(y - cy), x - cx)`.
    Rotation {
        center: Point,
        amplitude: f64,
    },
    /// `amplitude · (x - c)`.
    Dilation {
        center: Point,
        amplitude: f64,
    },
    /// `amplitude · η(r) cos(k(θ - phase)) r̂` about `center`, `η` a radial window.
    RadialBump {
        center: Point,
        k: f64,
        phase: f64,
        amplitude: f64,
        profile: Profile,
        r_start: f64,
        r_end: f64,
    },
    /// `amplitude · w(x) m(x) e_component`.
    AxisField {
        component: usize,
        amplitude: f64,
        window: Window,
        modulation: Modulation,
    },
    /// `direction · (1 - |x - c|²/R²)³` inside the disk of radius `R`, zero outside.
    InteriorBump {
        center: Point,
        radius: f64,
        direction: Point,
    },
    Sum {
        terms: Vec<(f64, FieldSpec)>,
    },
}

impl FieldSpec {
    pub fn value(&self, x: Point) -> Point {
        self.eval(x).0
    }

    pub fn jacobian(&self, x: Point) -> Mat2 {
        self.eval(x).1
    }

    /// Value and Jacobian `J[i][j] = ∂ψ_i/∂x_j`.
    pub fn eval(&self, x: Point) -> (Point, Mat2) {
        match self {
            FieldSpec::Constant { value } => (*value, [[0.0; 2]; 2]),
            FieldSpec::Rotation { center, amplitude: a } => (
                [-a * (x[1] - center[1]), a * (x[0] - center[0])],
                [[0.0, -a], [*a, 0.0]],
            ),
            FieldSpec::Dilation { center, amplitude: a } => (
                [a * (x[0] - center[0]), a * (x[1] - center[1])],
                [[*a, 0.0], [0.0, *a]],
            ),
            FieldSpec::RadialBump {
                center,
                k,
                phase,
                amplitude,
                profile,
                r_start,
                r_end,
            } => {
                let d = [x[0] - center[0], x[1] - center[1]];
                let r = d[0].hypot(d[1]);
                if r == 0.0 {
                    return ([0.0; 2], [[0.0; 2]; 2]);
                }
                let len = r_end - r_start;
                let (eta, deta) = profile.eval((r - r_start) / len);
                let deta = deta / len;
                let rh = [d[0] / r, d[1] / r];
                let th_hat = [-rh[1], rh[0]];
                let arg = k * (d[1].atan2(d[0]) - phase);
                let (c, s) = (arg.cos(), arg.sin());
                let g = amplitude * eta * c;
                // ∇g = A(η' cos r̂ - η k sin θ̂ / r)
                let gr = amplitude * deta * c;
                let gt = -amplitude * eta * k * s / r;
                let grad_g = [gr * rh[0] + gt * th_hat[0], gr * rh[1] + gt * th_hat[1]];
                // ∇(g r̂) = r̂ ⊗ ∇g + g (I - r̂ r̂ᵀ)/r
                let mut j = [[0.0; 2]; 2];
                for (a, row) in j.iter_mut().enumerate() {
                    for (b, v) in row.iter_mut().enumerate() {
                        let proj = if a == b { 1.0 } else { 0.0 } - rh[a] * rh[b];
                        *v = rh[a] * grad_g[b] + g * proj / r;
                    }
                }
                ([g * rh[0], g * rh[1]], j)
            }
            FieldSpec::AxisField {
                component,
                amplitude,
                window,
                modulation,
            } => {
                let (w, dw) = window.eval(x);
                let (m, dm) = modulation.eval(x);
                let mut v = [0.0; 2];
                let mut j = [[0.0; 2]; 2];
                v[*component] = amplitude * w * m;
                j[*component] = [
                    amplitude * (dw[0] * m + w * dm[0]),
                    amplitude * (dw[1] * m + w * dm[1]),
                ];
                (v, j)
            }
            FieldSpec::InteriorBump {
                center,
                radius,
                direction,
            } => {
                let d = [x[0] - center[0], x[1] - center[1]];
                let rho2 = (d[0] * d[0] + d[1] * d[1]) / (radius * radius);
                if rho2 >= 1.0 {
                    return ([0.0; 2], [[0.0; 2]; 2]);
                }
                let q = 1.0 - rho2;
                let beta = q * q * q;
                let c = -6.0 * q * q / (radius * radius);
                let grad = [c * d[0], c * d[1]];
                (
                    [direction[0] * beta, direction[1] * beta],
                    [
                        [direction[0] * grad[0], direction[0] * grad[1]],
                        [direction[1] * grad[0], direction[1] * grad[1]],
                    ],
                )
            }
            FieldSpec::Sum { terms } => {
                let mut v = [0.0; 2];
                let mut j = [[0.0; 2]; 2];
                for (c, f) in terms {
                    let (tv, tj) = f.eval(x);
                    for a in 0..2 {
                        v[a] += c * tv[a];
                        for b in 0..2 {
                            j[a][b] += c * tj[a][b];
                        }
                    }
                }
                (v, j)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Argument(m.to_string()));
        match self {
            // A reversed window (r_end < r_start) ramps inward.
            FieldSpec::RadialBump { r_start, r_end, .. }
                if !(r_end != r_start && r_start.is_finite() && r_end.is_finite()) =>
            {
                bad("radial_bump needs r_end != r_start")
            }
            FieldSpec::AxisField { component, window, .. } => {
                if *component > 1 {
                    bad("axis_field component must be 0 or 1")
                } else if window.profile != Profile::Unit && !(window.end > window.start) {
                    bad("axis_field window needs end > start")
                } else {
                    Ok(())
                }
            }
            FieldSpec::InteriorBump { radius, .. } if !(*radius > 0.0) => {
                bad("interior_bump radius must be positive")
            }
            FieldSpec::Sum { terms } => terms.iter().try_for_each(|(_, f)| f.validate()),
            _ => Ok(()),
        }
    }
}

/// Where a field is allowed to touch the boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Support {
    Global,
    /// Compactly supported in the open domain.
    Interior,
    /// Meets the boundary only in `S`.
    BoundaryS,
    /// Meets the boundary only in `W`.
    BoundaryW,
}

impl Support {
    /// Boundary tags on which a field with this support must vanish.
    pub fn excluded(self) -> &'static [Tag] {
        match self {
            Support::Global => &[],
            Support::Interior => &[Tag::S, Tag::W],
            Support::BoundaryS => &[Tag::W],
            Support::BoundaryW => &[Tag::S],
        }
    }
}

/// A displacement field ψ together with its declared support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementField {
    pub spec: FieldSpec,
    pub support: Support,
}

impl DisplacementField {
    pub fn new(spec: FieldSpec, support: Support) -> Result<Self> {
        spec.validate()?;
        Ok(DisplacementField { spec, support })
    }

    pub fn with_support(mut self, support: Support) -> Self {
        self.support = support;
        self
    }

    pub fn value(&self, x: Point) -> Point {
        self.spec.value(x)
    }

    pub fn jacobian(&self, x: Point) -> Mat2 {
        self.spec.jacobian(x)
    }

    pub fn eval(&self, x: Point) -> (Point, Mat2) {
        self.spec.eval(x)
    }

    pub fn divergence(&self, x: Point) -> f64 {
        let j = self.jacobian(x);
        j[0][0] + j[1][1]
    }

    pub fn scaled(&self, c: f64) -> Self {
        DisplacementField {
            spec: FieldSpec::Sum {
                terms: vec![(c, self.spec.clone())],
            },
            support: self.support,
        }
    }

    /// `Σ c_i ψ_i`; the support is shared if all terms agree, global otherwise.
    pub fn combine(terms: &[(f64, &DisplacementField)]) -> Self {
        let support = match terms.first() {
            Some((_, f)) if terms.iter().all(|(_, g)| g.support == f.support) => f.support,
            _ => Support::Global,
        };
        DisplacementField {
            spec: FieldSpec::Sum {
                terms: terms.iter().map(|(c, f)| (*c, f.spec.clone())).collect(),
            },
            support,
        }
    }

    /// Largest `|ψ| + ‖∇ψ‖` over the quadrature points of boundary edges the
    /// declared support excludes (zero when the contract holds).
    pub fn support_violation(&self, mesh: &Mesh) -> f64 {
        let excluded = self.support.excluded();
        let mut worst: f64 = 0.0;
        for e in mesh.boundary().iter().filter(|e| excluded.contains(&e.tag)) {
            let (p, q) = (mesh.vertices()[e.a], mesh.vertices()[e.b]);
            for s in [0.0, 0.5 - 0.5 / 3f64.sqrt(), 0.5, 0.5 + 0.5 / 3f64.sqrt(), 1.0] {
                let x = [p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])];
                let (v, j) = self.eval(x);
                worst = worst.max(v[0].hypot(v[1]) + frobenius(&j));
            }
        }
        worst
    }
}

pub(crate) fn frobenius(j: &Mat2) -> f64 {
    (j[0][0].powi(2) + j[0][1].powi(2) + j[1][0].powi(2) + j[1][1].powi(2)).sqrt()
}

/// Largest singular value of a 2×2 matrix.
pub fn spectral_norm(j: &Mat2) -> f64 {
    let f2 = j[0][0].powi(2) + j[0][1].powi(2) + j[1][0].powi(2) + j[1][1].powi(2);
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    let disc = (f2 * f2 - 4.0 * det * det).max(0.0).sqrt();
    (0.5 * (f2 + disc)).sqrt()
}

const HESSIAN_STEP: f64 = 1e-4;

/// Sample estimate of `‖ψ‖_{C²}`: the maximum over `samples` of
/// `|ψ| + ‖∇ψ‖₂ + ‖∇²ψ‖_F`, where `‖∇ψ‖₂` is the spectral norm and the
/// second derivatives come from central differences of the Jacobian.
/// Being a maximum over finitely many points it is a lower bound of the
/// true supremum.
pub fn c2_norm_estimate(psi: &DisplacementField, samples: &[Point]) -> f64 {
    let h = HESSIAN_STEP;
    samples
        .iter()
        .map(|&x| {
            let (v, j) = psi.eval(x);
            let mut hess = 0.0;
            for d in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[d] += h;
                xm[d] -= h;
                let (jp, jm) = (psi.jacobian(xp), psi.jacobian(xm));
                for a in 0..2 {
                    for b in 0..2 {
                        hess += ((jp[a][b] - jm[a][b]) / (2.0 * h)).powi(2);
                    }
                }
            }
            v[0].hypot(v[1]) + spectral_norm(&j) + hess.sqrt()
        })
        .fold(0.0, f64::max)
}

/// Shorthand for building a numeric parameter map.
pub fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn profile_from(p: &BTreeMap<String, f64>) -> Result<Profile> {
    if let Some(&power) = p.get("power") {
        return Ok(Profile::Power { p: power });
    }
    if let Some(&knee) = p.get("knee") {
        if !(knee > 0.0 && knee <= 1.0) {
            return Err(Error::Argument("parabolic knee must lie in (0, 1]".into()));
        }
        return Ok(Profile::Parabolic { knee });
    }
    match p.get("profile").copied().unwrap_or(0.0) as i64 {
        0 => Ok(Profile::Unit),
        1 => Ok(Profile::Smoothstep),
        2 => Ok(Profile::Hump),
        other => Err(Error::Argument(format!("unknown profile code {other}"))),
    }
}

fn support_from(p: &BTreeMap<String, f64>, default: Support) -> Result<Support> {
    match p.get("support").map(|&s| s as i64) {
        None => Ok(default),
        Some(0) => Ok(Support::Global),
        Some(1) => Ok(Support::Interior),
        Some(2) => Ok(Support::BoundaryS),
        Some(3) => Ok(Support::BoundaryW),
        Some(other) => Err(Error::Argument(format!("unknown support code {other}"))),
    }
}

/// Builds a library field from a family name and a numeric parameter map.
///
/// | family | keys (defaults) |
/// |---|---|
/// | `constant` | `vx`, `vy` (0) |
/// | `rotation`, `dilation` | `cx`, `cy` (0), `amplitude` (1) |
/// | `radial_bump` | `k` (0), `phase` (0), `amplitude` (1), `cx`, `cy` (0), `r_start` (0), `r_end` (1), profile |
/// | `axis_field` | `component` (0), `amplitude` (1), `coordinate` (0 radius, 1 x, 2 y), `cx`, `cy`, `start` (0), `end` (1), profile, `k` or `wx`/`wy` with `phase` |
/// | `interior_bump` | `cx`, `cy` (0), `radius` (required), `vx` (1), `vy` (0) |
///
/// The profile is `power` when that key is present, then parabolic when
/// `knee` is present, otherwise `profile` (0 unit, 1 smoothstep, 2 hump). An optional `support` key (0 global,
/// 1 interior, 2 S, 3 W) overrides the family default.
pub fn field_library(family: &str, p: &BTreeMap<String, f64>) -> Result<DisplacementField> {
    let get = |k: &str, d: f64| p.get(k).copied().unwrap_or(d);
    let center = [get("cx", 0.0), get("cy", 0.0)];
    let (spec, default) = match family {
        "constant" => (
            FieldSpec::Constant {
                value: [get("vx", 0.0), get("vy", 0.0)],
            },
            Support::Global,
        ),
        "rotation" => (
            FieldSpec::Rotation {
                center,
                amplitude: get("amplitude", 1.0),
            },
            Support::Global,
        ),
        "dilation" => (
            FieldSpec::Dilation {
                center,
                amplitude: get("amplitude", 1.0),
            },
            Support::Global,
        ),
        "radial_bump" => (
            FieldSpec::RadialBump {
                center,
                k: get("k", 0.0),
                phase: get("phase", 0.0),
                amplitude: get("amplitude", 1.0),
                profile: profile_from(p)?,
                r_start: get("r_start", 0.0),
                r_end: get("r_end", 1.0),
            },
            Support::Global,
        ),
        "axis_field" => {
            let coordinate = match get("coordinate", 0.0) as i64 {
                0 => Coordinate::Radius { center },
                1 => Coordinate::X,
                2 => Coordinate::Y,
                other => return Err(Error::Argument(format!("unknown coordinate code {other}"))),
            };
            let modulation = if let Some(&k) = p.get("k") {
                Modulation::Angular {
                    k,
                    phase: get("phase", 0.0),
                    center,
                }
            } else if p.contains_key("wx") || p.contains_key("wy") {
                Modulation::Planar {
                    wave: [get("wx", 0.0), get("wy", 0.0)],
                    phase: get("phase", 0.0),
                }
            } else {
                Modulation::None
            };
            (
                FieldSpec::AxisField {
                    component: get("component", 0.0) as usize,
                    amplitude: get("amplitude", 1.0),
                    window: Window {
                        coordinate,
                        start: get("start", 0.0),
                        end: get("end", 1.0),
                        profile: profile_from(p)?,
                    },
                    modulation,
                },
                Support::Global,
            )
        }
        "interior_bump" => {
            let radius = *p
                .get("radius")
                .ok_or_else(|| Error::Argument("interior_bump needs a radius".into()))?;
            (
                FieldSpec::InteriorBump {
                    center,
                    radius,
                    direction: [get("vx", 1.0), get("vy", 0.0)],
                },
                Support::Interior,
            )
        }
        other => return Err(Error::Argument(format!("unknown field family '{other}'"))),
    };
    DisplacementField::new(spec, support_from(p, default)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::mesh::build_annulus;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn library() -> Vec<DisplacementField> {
        let fam = |f: &str, p: &[(&str, f64)]| field_library(f, &params(p)).unwrap();
        vec![
            fam("constant", &[("vx", 0.3), ("vy", -1.0)]),
            fam("rotation", &[("cx", 0.2)]),
            fam("dilation", &[("amplitude", 0.5)]),
            fam("radial_bump", &[("k", 2.0), ("r_start", 0.6), ("r_end", 1.0), ("power", 3.0)]),
            fam("radial_bump", &[("k", 3.0), ("phase", 0.4), ("r_start", 0.5), ("r_end", 1.0), ("profile", 1.0)]),
            fam("radial_bump", &[("k", 0.0), ("r_start", 0.55), ("r_end", 0.95), ("profile", 2.0)]),
            fam("radial_bump", &[("k", 4.0), ("r_start", 0.9), ("r_end", 0.5), ("knee", 0.25)]),
            fam("axis_field", &[("component", 1.0), ("start", 0.6), ("end", 1.0), ("power", 3.0), ("k", 2.0)]),
            fam("axis_field", &[("coordinate", 2.0), ("start", 0.1), ("end", 0.9), ("profile", 2.0), ("wx", 3.0)]),
            fam("interior_bump", &[("cx", 0.7), ("radius", 0.2), ("vx", 0.6), ("vy", 0.8)]),
        ]
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-5;
        for f in library() {
            for _ in 0..1000 {
                let x: Point = [rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2)];
                if x[0].hypot(x[1]) < 0.05 {
                    continue;
                }
                let j = f.jacobian(x);
                for d in 0..2 {
                    let mut xp = x;
                    let mut xm = x;
                    xp[d] += h;
                    xm[d] -= h;
                    let (vp, vm) = (f.value(xp), f.value(xm));
                    for a in 0..2 {
                        let fd = (vp[a] - vm[a]) / (2.0 * h);
                        assert!((fd - j[a][d]).abs() <= 1e-6 * (1.0 + j[a][d].abs()), "{:?} at {x:?}: {fd} vs {}", f.spec, j[a][d]);
                    }
                }
            }
        }
    }

    #[test]
    fn library_examples() {
        let c = field_library("constant", &params(&[("vx", 1.0)])).unwrap();
        assert_eq!(c.jacobian([0.3, 0.2]), [[0.0; 2]; 2]);
        let r = field_library("rotation", &params(&[])).unwrap();
        assert_eq!(r.jacobian([0.3, 0.2]), [[0.0, -1.0], [1.0, 0.0]]);
        assert_eq!(r.divergence([0.7, -0.1]), 0.0);
        assert!(matches!(field_library("twist", &params(&[])), Err(Error::Argument(_))));
        assert!(field_library("interior_bump", &params(&[])).is_err());
    }

    #[test]
    fn radial_bump_has_cos_k_theta_dependence() {
        let f = field_library("radial_bump", &params(&[("k", 2.0), ("profile", 0.0)])).unwrap();
        for th in [0.0, 0.3, 1.1, 2.5] {
            let v = f.value([0.8 * f64::cos(th), 0.8 * f64::sin(th)]);
            let radial = v[0] * th.cos() + v[1] * th.sin();
            assert!((radial - (2.0 * th).cos()).abs() < 1e-14);
        }
    }

    #[test]
    fn interior_bump_vanishes_on_boundary() {
        let mesh = build_annulus(0.5, 1.0, 4, 32).unwrap();
        let f = field_library("interior_bump", &params(&[("cx", 0.75), ("radius", 0.2)])).unwrap();
        assert_eq!(f.support, Support::Interior);
        assert_eq!(f.support_violation(&mesh), 0.0);
    }

    #[test]
    fn c2_norm_examples() {
        let pts: Vec<Point> = (0..=20)
            .flat_map(|i| (0..=20).map(move |j| [-1.0 + 0.1 * i as f64, -1.0 + 0.1 * j as f64]))
            .filter(|p| p[0].hypot(p[1]) <= 1.0 + 1e-12)
            .collect();
        let zero = field_library("constant", &params(&[])).unwrap();
        assert_eq!(c2_norm_estimate(&zero, &pts), 0.0);
        let c = field_library("constant", &params(&[("vx", 0.25)])).unwrap();
        assert_eq!(c2_norm_estimate(&c, &pts), 0.25);
        let rot = field_library("rotation", &params(&[])).unwrap();
        let n = c2_norm_estimate(&rot, &pts);
        assert!((n - 2.0).abs() < 1e-9, "{n}");
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        assert!((spectral_norm(&[[3.0, 0.0], [0.0, -4.0]]) - 4.0).abs() < 1e-14);
        assert!((spectral_norm(&[[0.0, -1.0], [1.0, 0.0]]) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn spec_serializes() {
        for f in library() {
            let text = serde_json::to_string(&f).unwrap();
            let back: DisplacementField = serde_json::from_str(&text).unwrap();
            assert_eq!(back, f);
        }
    }

    proptest! {
        #[test]
        fn combination_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, x in -1.0f64..1.0, y in -1.0f64..1.0) {
            let lib = library();
            let (f, g) = (&lib[3], &lib[6]);
            let s = DisplacementField::combine(&[(a, f), (b, g)]);
            let (vs, js) = s.eval([x, y]);
            let (vf, jf) = f.eval([x, y]);
            let (vg, jg) = g.eval([x, y]);
            for i in 0..2 {
                prop_assert!((vs[i] - a * vf[i] - b * vg[i]).abs() < 1e-12);
                for j in 0..2 {
                    prop_assert!((js[i][j] - a * jf[i][j] - b * jg[i][j]).abs() < 1e-12);
                }
            }
        }
    }
}
