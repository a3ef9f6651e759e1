//! P1 assembly of the stiffness, boundary-mass and volume-mass forms and of
//! the pencil `(A, B)` for every problem variant.

use serde::{Deserialize, Serialize};

use crate::coefficient::{min_eigenvalue, MatrixField, ScalarField, Site};
use crate::error::{Error, Result};
use crate::geometry::{Mat2, Mesh, Point, Tag};
use crate::linalg::{CsrMatrix, EnvelopeCholesky, TripletBuilder};
use crate::quadrature::{edge_gauss, VolumeRule};

/// Problem variant. `A` always contains the (possibly anisotropic)
/// stiffness; the lower-order term sits on the whole boundary or in the volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// `∫∇u∇v + ∫_∂Ω uv`.
    P1,
    /// `∫∇u∇v + ∫_Ω uv`.
    P2,
    /// `∫∇u∇v + ∫_∂Ω a uv`.
    P3a,
    /// `∫∇u∇v + ∫_Ω a uv`.
    P3b,
    /// `∫A∇u·∇v + ∫_∂Ω uv`.
    P4a,
    /// `∫A∇u·∇v + ∫_Ω uv`.
    P4b,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::P1,
        Variant::P2,
        Variant::P3a,
        Variant::P3b,
        Variant::P4a,
        Variant::P4b,
    ];

    /// Lower-order term on the boundary (true) or in the volume (false).
    pub fn boundary_mass(self) -> bool {
        matches!(self, Variant::P1 | Variant::P3a | Variant::P4a)
    }

    pub fn uses_potential(self) -> bool {
        matches!(self, Variant::P3a | Variant::P3b)
    }

    pub fn uses_conductivity(self) -> bool {
        matches!(self, Variant::P4a | Variant::P4b)
    }

    pub fn parse(name: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| format!("{v:?}").eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Argument(format!("unknown problem variant '{name}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    All,
    S,
    W,
}

impl Region {
    pub fn contains(self, tag: Tag) -> bool {
        match self {
            Region::All => true,
            Region::S => tag == Tag::S,
            Region::W => tag == Tag::W,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub variant: Variant,
    /// Potential `a(x)` of P3a/P3b; ignored otherwise.
    #[serde(default = "one")]
    pub potential: ScalarField,
    /// Conductivity `A(x)` of P4a/P4b; ignored otherwise.
    #[serde(default = "MatrixField::identity")]
    pub conductivity: MatrixField,
    #[serde(default)]
    pub quadrature: VolumeRule,
}

fn one() -> ScalarField {
    ScalarField::constant(1.0)
}

impl ProblemSpec {
    pub fn new(variant: Variant) -> Self {
        ProblemSpec {
            variant,
            potential: one(),
            conductivity: MatrixField::identity(),
            quadrature: VolumeRule::default(),
        }
    }

    pub fn with_potential(mut self, a: ScalarField) -> Self {
        self.potential = a;
        self
    }

    pub fn with_conductivity(mut self, a: MatrixField) -> Self {
        self.conductivity = a;
        self
    }

    pub fn with_quadrature(mut self, rule: VolumeRule) -> Self {
        self.quadrature = rule;
        self
    }

    /// The conductivity actually used by the variant (identity unless P4).
    pub fn effective_conductivity(&self) -> MatrixField {
        if self.variant.uses_conductivity() {
            self.conductivity.clone()
        } else {
            MatrixField::identity()
        }
    }

    /// The potential actually used by the variant (one unless P3).
    pub fn effective_potential(&self) -> ScalarField {
        if self.variant.uses_potential() {
            self.potential.clone()
        } else {
            one()
        }
    }
}

/// The pencil `A x = λ B x` together with its two parts `A = K + mass`.
#[derive(Debug, Clone)]
pub struct AssembledPair {
    pub a: CsrMatrix,
    pub b: CsrMatrix,
    pub stiffness: CsrMatrix,
    pub mass: CsrMatrix,
}

/// Gradients of the barycentric coordinates and the (positive) area.
pub(crate) fn element_gradients(mesh: &Mesh, t: usize) -> ([Point; 3], f64) {
    let tri = mesh.triangles()[t];
    let p = tri.map(|v| mesh.vertices()[v]);
    let area = mesh.triangle_area(t);
    let inv = 1.0 / (2.0 * area);
    let g = [0, 1, 2].map(|i| {
        let (a, b) = (p[(i + 1) % 3], p[(i + 2) % 3]);
        [(a[1] - b[1]) * inv, (b[0] - a[0]) * inv]
    });
    (g, area)
}

pub(crate) fn bary_point(mesh: &Mesh, t: usize, l: [f64; 3]) -> Point {
    let tri = mesh.triangles()[t];
    let mut x = [0.0; 2];
    for (k, &v) in tri.iter().enumerate() {
        let p = mesh.vertices()[v];
        x[0] += l[k] * p[0];
        x[1] += l[k] * p[1];
    }
    x
}

pub(crate) fn edge_point(mesh: &Mesh, a: usize, b: usize, s: f64) -> Point {
    let (p, q) = (mesh.vertices()[a], mesh.vertices()[b]);
    [p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])]
}

fn mat_vec(m: &Mat2, v: Point) -> Point {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Per-quadrature-point change of variables: `F⁻¹` and `|det F|`.
pub(crate) type Transform = Option<(Mat2, f64)>;

/// Stiffness with integrand `gᵢᵀ F⁻¹ C F⁻ᵀ gⱼ |det F|`; `transform` returns
/// `None` where `F = I`. With a constant coefficient and no transform on an
/// element the single-point formula is used, so those entries are bitwise
/// identical to the plain assembly.
pub(crate) fn stiffness_kernel(
    mesh: &Mesh,
    coeff: &MatrixField,
    rule: VolumeRule,
    require_spd: bool,
    transform: &dyn Fn(usize, Point) -> Result<Transform>,
) -> Result<CsrMatrix> {
    let constant = coeff.as_constant();
    if let Some(c) = constant {
        check_conductivity(&c, None, require_spd)?;
    }
    let pts = rule.points();
    let mut out = TripletBuilder::new(mesh.num_vertices());
    for t in 0..mesh.triangles().len() {
        let (g, area) = element_gradients(mesh, t);
        let mut samples = Vec::with_capacity(pts.len());
        let mut any = false;
        for (l, w) in pts {
            let x = bary_point(mesh, t, *l);
            let tr = transform(t, x)?;
            any |= tr.is_some();
            samples.push((x, *w, tr));
        }
        let mut ke = [[0.0; 3]; 3];
        match constant {
            Some(c) if !any => {
                for i in 0..3 {
                    for j in 0..3 {
                        ke[i][j] = area * dot(g[i], mat_vec(&c, g[j]));
                    }
                }
            }
            _ => {
                for (x, w, tr) in samples {
                    let c = match constant {
                        Some(c) => c,
                        None => {
                            let c = coeff.eval(Site::volume(x));
                            check_conductivity(&c, Some(x), require_spd)?;
                            c
                        }
                    };
                    let (finv, det) = tr.unwrap_or(([[1.0, 0.0], [0.0, 1.0]], 1.0));
                    // F⁻ᵀ g
                    let h = g.map(|gi| [finv[0][0] * gi[0] + finv[1][0] * gi[1], finv[0][1] * gi[0] + finv[1][1] * gi[1]]);
                    for i in 0..3 {
                        for j in 0..3 {
                            ke[i][j] += w * area * det * dot(h[i], mat_vec(&c, h[j]));
                        }
                    }
                }
            }
        }
        let tri = mesh.triangles()[t];
        for i in 0..3 {
            for j in 0..3 {
                out.push(tri[i], tri[j], ke[i][j]);
            }
        }
    }
    Ok(out.build())
}

fn check_conductivity(c: &Mat2, x: Option<Point>, require_spd: bool) -> Result<()> {
    let scale = c[0][0].abs().max(c[1][1].abs()).max(c[0][1].abs()).max(f64::MIN_POSITIVE);
    if (c[0][1] - c[1][0]).abs() > 1e-14 * scale {
        return Err(Error::Argument(format!("conductivity {c:?} is not symmetric")));
    }
    if require_spd && !(min_eigenvalue(c) > 0.0) {
        let at = x.map_or_else(|| "everywhere".to_string(), |x| format!("at quadrature point {x:?}"));
        return Err(Error::Coercivity(format!(
            "conductivity {c:?} is not positive definite {at}"
        )));
    }
    Ok(())
}

/// Boundary mass with per-Gauss-point stretch factor (`None` = 1).
pub(crate) fn boundary_mass_kernel(
    mesh: &Mesh,
    region: Region,
    weight: &ScalarField,
    stretch: &dyn Fn(usize, f64) -> Result<Option<f64>>,
) -> Result<CsrMatrix> {
    let constant = weight.as_constant();
    let mut out = TripletBuilder::new(mesh.num_vertices());
    for (k, e) in mesh.boundary().iter().enumerate() {
        if !region.contains(e.tag) {
            continue;
        }
        let len = mesh.edge_length(e);
        let gauss = edge_gauss();
        let factors = [stretch(k, gauss[0].0)?, stretch(k, gauss[1].0)?];
        let mut me = [[0.0; 2]; 2];
        match constant {
            Some(w) if factors.iter().all(Option::is_none) => {
                me = [[w * len / 3.0, w * len / 6.0], [w * len / 6.0, w * len / 3.0]];
            }
            _ => {
                for ((s, gw), f) in gauss.into_iter().zip(factors) {
                    let x = edge_point(mesh, e.a, e.b, s);
                    let w = constant.unwrap_or_else(|| weight.eval(Site::edge(x, e.tag)));
                    let phi = [1.0 - s, s];
                    let c = gw * len * w * f.unwrap_or(1.0);
                    for i in 0..2 {
                        for j in 0..2 {
                            me[i][j] += c * phi[i] * phi[j];
                        }
                    }
                }
            }
        }
        let v = [e.a, e.b];
        for i in 0..2 {
            for j in 0..2 {
                out.push(v[i], v[j], me[i][j]);
            }
        }
    }
    Ok(out.build())
}

/// Volume mass with per-quadrature-point Jacobian factor (`None` = 1).
pub(crate) fn volume_mass_kernel(
    mesh: &Mesh,
    weight: &ScalarField,
    rule: VolumeRule,
    factor: &dyn Fn(usize, Point) -> Result<Option<f64>>,
) -> Result<CsrMatrix> {
    let constant = weight.as_constant();
    let pts = rule.points();
    let mut out = TripletBuilder::new(mesh.num_vertices());
    for t in 0..mesh.triangles().len() {
        let area = mesh.triangle_area(t);
        let mut samples = Vec::with_capacity(pts.len());
        let mut any = false;
        for (l, w) in pts {
            let x = bary_point(mesh, t, *l);
            let f = factor(t, x)?;
            any |= f.is_some();
            samples.push((x, *l, *w, f));
        }
        let mut me = [[0.0; 3]; 3];
        match constant {
            Some(w) if !any => {
                let d = w * area / 6.0;
                let o = w * area / 12.0;
                me = [[d, o, o], [o, d, o], [o, o, d]];
            }
            _ => {
                for (x, l, qw, f) in samples {
                    let w = constant.unwrap_or_else(|| weight.eval(Site::volume(x)));
                    let c = qw * area * w * f.unwrap_or(1.0);
                    for i in 0..3 {
                        for j in 0..3 {
                            me[i][j] += c * l[i] * l[j];
                        }
                    }
                }
            }
        }
        let tri = mesh.triangles()[t];
        for i in 0..3 {
            for j in 0..3 {
                out.push(tri[i], tri[j], me[i][j]);
            }
        }
    }
    Ok(out.build())
}

/// `∫ C∇φ_p·∇φ_q`; the coefficient must be symmetric positive definite at
/// every quadrature point.
pub fn assemble_stiffness(mesh: &Mesh, coeff: &MatrixField, rule: VolumeRule) -> Result<CsrMatrix> {
    stiffness_kernel(mesh, coeff, rule, true, &|_, _| Ok(None))
}

/// Stiffness of an arbitrary symmetric (possibly indefinite) matrix field.
pub fn assemble_stiffness_signed(mesh: &Mesh, coeff: &MatrixField, rule: VolumeRule) -> Result<CsrMatrix> {
    stiffness_kernel(mesh, coeff, rule, false, &|_, _| Ok(None))
}

/// `∫_region w φ_p φ_q dσ`.
pub fn assemble_boundary_mass(mesh: &Mesh, region: Region, weight: &ScalarField) -> CsrMatrix {
    boundary_mass_kernel(mesh, region, weight, &|_, _| Ok(None)).expect("no transform")
}

/// `∫_Ω w φ_p φ_q dx`. Constant weights are integrated exactly.
pub fn assemble_volume_mass(mesh: &Mesh, weight: &ScalarField, rule: VolumeRule) -> CsrMatrix {
    volume_mass_kernel(mesh, weight, rule, &|_, _| Ok(None)).expect("no transform")
}

/// The lower-order part of `A` for the variant.
pub fn assemble_lower_order(mesh: &Mesh, spec: &ProblemSpec) -> CsrMatrix {
    let a = spec.effective_potential();
    if spec.variant.boundary_mass() {
        assemble_boundary_mass(mesh, Region::All, &a)
    } else {
        assemble_volume_mass(mesh, &a, spec.quadrature)
    }
}

fn check_potential(mesh: &Mesh, spec: &ProblemSpec) -> Result<()> {
    let a = &spec.potential;
    let mut sites = Vec::new();
    if spec.variant.boundary_mass() {
        for e in mesh.boundary() {
            for (s, _) in edge_gauss() {
                sites.push(Site::edge(edge_point(mesh, e.a, e.b, s), e.tag));
            }
        }
    } else {
        for t in 0..mesh.triangles().len() {
            for (l, _) in spec.quadrature.points() {
                sites.push(Site::volume(bary_point(mesh, t, *l)));
            }
        }
    }
    for site in sites {
        let v = a.eval(site);
        if !(v > 0.0) {
            return Err(Error::Coercivity(format!(
                "potential {v:e} is not positive at {:?}",
                site.x
            )));
        }
    }
    Ok(())
}

/// Assembles `A = K + lower-order` and `B = boundary mass on S` and checks
/// that `A` admits a Cholesky factorization.
pub fn assemble_problem(mesh: &Mesh, spec: &ProblemSpec) -> Result<AssembledPair> {
    if spec.variant.uses_potential() {
        check_potential(mesh, spec)?;
    }
    let stiffness = assemble_stiffness(mesh, &spec.effective_conductivity(), spec.quadrature)?;
    let mass = assemble_lower_order(mesh, spec);
    let a = stiffness.add_scaled(1.0, &mass);
    EnvelopeCholesky::factor(&a)?;
    let b = assemble_boundary_mass(mesh, Region::S, &ScalarField::constant(1.0));
    Ok(AssembledPair {
        a,
        b,
        stiffness,
        mass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_annulus, build_rectangle, Point};
    use proptest::prelude::*;

    fn top_s(p: Point, q: Point) -> Tag {
        if p[1] > 0.999 && q[1] > 0.999 {
            Tag::S
        } else {
            Tag::W
        }
    }

    fn square() -> Mesh {
        build_rectangle(1.0, 1.0, 1, 1, top_s).unwrap()
    }

    #[test]
    fn unit_square_stiffness() {
        let k = assemble_stiffness(&square(), &MatrixField::identity(), VolumeRule::Degree2).unwrap();
        for i in 0..4 {
            assert!((k.get(i, i) - 1.0).abs() < 1e-14);
            let row: f64 = k.row(i).map(|(_, v)| v).sum();
            assert!(row.abs() < 1e-14);
        }
        // hand integration: diagonal neighbours decouple, sides couple with -1/2
        assert!((k.get(0, 1) + 0.5).abs() < 1e-14);
        assert!(k.get(0, 3).abs() < 1e-14);
    }

    #[test]
    fn scaled_identity_is_exact_multiple() {
        let m = build_annulus(0.5, 1.0, 3, 16).unwrap();
        let k = assemble_stiffness(&m, &MatrixField::identity(), VolumeRule::Degree2).unwrap();
        let c = MatrixField::Constant {
            value: [[4.0, 0.0], [0.0, 4.0]],
        };
        let k4 = assemble_stiffness(&m, &c, VolumeRule::Degree2).unwrap();
        assert_eq!(k4, k.scaled(4.0));
    }

    #[test]
    fn indefinite_conductivity_is_rejected() {
        let c = MatrixField::Constant {
            value: [[1.0, 0.0], [0.0, -1.0]],
        };
        let r = assemble_stiffness(&square(), &c, VolumeRule::Degree2);
        assert!(matches!(r, Err(Error::Coercivity(_))));
    }

    #[test]
    fn edge_mass_block() {
        let m = square();
        let b = assemble_boundary_mass(&m, Region::S, &ScalarField::constant(1.0));
        // the S edge joins vertices 2 and 3 with length 1
        assert_eq!(b.get(2, 2), 1.0 / 3.0);
        assert_eq!(b.get(2, 3), 1.0 / 6.0);
        assert_eq!(b.get(0, 0), 0.0);
        let all = assemble_boundary_mass(&m, Region::All, &ScalarField::constant(1.0));
        assert!((all.values().iter().sum::<f64>() - 4.0).abs() < 1e-14);
        let annulus = build_annulus(0.5, 1.0, 2, 16).unwrap();
        let all = assemble_boundary_mass(&annulus, Region::All, &ScalarField::constant(1.0));
        assert!((all.values().iter().sum::<f64>() - annulus.perimeter()).abs() < 1e-13);
    }

    #[test]
    fn region_without_edges_gives_zero() {
        let m = build_rectangle(1.0, 1.0, 2, 2, top_s).unwrap();
        let z = assemble_boundary_mass(&m, Region::W, &ScalarField::constant(0.0));
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn triangle_mass_matrix() {
        let m = square();
        let mv = assemble_volume_mass(&m, &ScalarField::constant(1.0), VolumeRule::Degree2);
        // vertex 1 belongs only to the first triangle (area 1/2)
        assert!((mv.get(1, 1) - 0.5 / 6.0).abs() < 1e-16);
        assert!((mv.values().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let z = assemble_volume_mass(&m, &ScalarField::constant(0.0), VolumeRule::Degree2);
        assert_eq!(z.max_abs(), 0.0);
        // the quadrature path agrees with the exact formula for a constant weight
        let w = ScalarField::Sum {
            terms: vec![(1.0, ScalarField::constant(1.0))],
        };
        let q = assemble_volume_mass(&m, &w, VolumeRule::Degree2);
        assert!(q.add_scaled(-1.0, &mv).max_abs() < 1e-16);
    }

    #[test]
    fn weighted_volume_mass_integrates_weight() {
        let m = build_rectangle(2.0, 1.0, 6, 3, top_s).unwrap();
        let w = ScalarField::Planar {
            wave: [0.0, 0.0],
            amplitude: 3.0,
            phase: 0.0,
        };
        let mv = assemble_volume_mass(&m, &w, VolumeRule::Degree4);
        assert!((mv.values().iter().sum::<f64>() - 6.0).abs() < 1e-13);
    }

    #[test]
    fn variant_identities() {
        let m = build_annulus(0.5, 1.0, 3, 16).unwrap();
        let p1 = assemble_problem(&m, &ProblemSpec::new(Variant::P1)).unwrap();
        let p3 = assemble_problem(&m, &ProblemSpec::new(Variant::P3a)).unwrap();
        let p4 = assemble_problem(&m, &ProblemSpec::new(Variant::P4a)).unwrap();
        assert_eq!(p1.a, p3.a);
        assert_eq!(p1.a, p4.a);
        assert_eq!(p1.b, p4.b);
        let bad = ProblemSpec::new(Variant::P3b).with_potential(ScalarField::constant(-1.0));
        assert!(matches!(assemble_problem(&m, &bad), Err(Error::Coercivity(_))));
        assert!(Variant::parse("p4B").is_ok());
        assert!(Variant::parse("P9").is_err());
    }

    #[test]
    fn b_rows_off_s_are_zero() {
        let m = build_annulus(0.5, 1.0, 3, 16).unwrap();
        let pair = assemble_problem(&m, &ProblemSpec::new(Variant::P2)).unwrap();
        let on_s = m.tagged_vertices(Tag::S);
        for (i, nz) in pair.b.nonzero_rows().into_iter().enumerate() {
            assert_eq!(nz, on_s.binary_search(&i).is_ok());
        }
    }

    proptest! {
        #[test]
        fn assembled_matrices_are_symmetric_and_b_psd(seed in 0u64..50, v in 0usize..6) {
            use rand::{Rng, SeedableRng};
            let m = build_annulus(0.4, 1.0, 2, 12).unwrap();
            let spec = ProblemSpec::new(Variant::ALL[v])
                .with_potential(ScalarField::Sum { terms: vec![(1.0, ScalarField::constant(1.5)), (1.0, ScalarField::Angular { k: 3.0, amplitude: 0.5, phase: 0.0, center: [0.0, 0.0] })] })
                .with_conductivity(MatrixField::Entries {
                    xx: ScalarField::constant(2.0),
                    xy: ScalarField::Planar { wave: [1.0, 2.0], amplitude: 0.3, phase: 0.0 },
                    yy: ScalarField::constant(1.0),
                });
            let pair = assemble_problem(&m, &spec).unwrap();
            prop_assert!(pair.a.asymmetry() <= 1e-12 * pair.a.max_abs());
            prop_assert!(pair.b.asymmetry() <= 1e-12 * pair.b.max_abs());
            let kc = pair.stiffness.mul_vec(&vec![1.0; m.num_vertices()]);
            prop_assert!(kc.iter().all(|x| x.abs() < 1e-12));
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = (0..m.num_vertices()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let yy: f64 = y.iter().map(|v| v * v).sum();
            prop_assert!(pair.b.quad_form(&y) >= -1e-12 * pair.b.max_abs() * yy);
        }

        #[test]
        fn assembly_is_linear_in_weight(a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let m = build_annulus(0.5, 1.0, 2, 12).unwrap();
            let f = ScalarField::Angular { k: 2.0, amplitude: 1.0, phase: 0.0, center: [0.0, 0.0] };
            let g = ScalarField::Planar { wave: [1.0, -1.0], amplitude: 1.0, phase: 0.2 };
            let combo = ScalarField::Sum { terms: vec![(a, f.clone()), (b, g.clone())] };
            let lhs = assemble_volume_mass(&m, &combo, VolumeRule::Degree2);
            let rhs = assemble_volume_mass(&m, &f, VolumeRule::Degree2).scaled(a)
                .add_scaled(b, &assemble_volume_mass(&m, &g, VolumeRule::Degree2));
            prop_assert!(lhs.add_scaled(-1.0, &rhs).max_abs() <= 1e-12 * rhs.max_abs().max(1e-300));
            let lhs = assemble_boundary_mass(&m, Region::All, &combo);
            let rhs = assemble_boundary_mass(&m, Region::All, &f).scaled(a)
                .add_scaled(b, &assemble_boundary_mass(&m, Region::All, &g));
            prop_assert!(lhs.add_scaled(-1.0, &rhs).max_abs() <= 1e-12 * rhs.max_abs().max(1e-300));
        }
    }
}
