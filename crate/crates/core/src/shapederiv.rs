//! Derivatives of the assembled forms along a domain deformation
//! `x ↦ x + tψ(x)`, the group perturbation matrix, its deviation from a
//! scalar matrix, first-order splitting predictions and finite-difference
//! validation.
//!
//! All derivatives are taken on the fixed reference mesh with coefficients
//! attached to material points. With `G = ∇ψ` (`G_ij = ∂ψ_i/∂x_j`):
//!
//! * stiffness: `div ψ ∇u·C∇v - ∇uᵀ(GC + CGᵀ)∇v`;
//! * boundary mass: `uv (div ψ - νᵀGν)`;
//! * volume mass: `uv div ψ`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::coefficient::{MatrixField, ScalarField, Site};
use crate::error::{Error, Result};
use crate::forms::{
    assemble_problem, bary_point, boundary_mass_kernel, edge_point, element_gradients,
    stiffness_kernel, volume_mass_kernel, ProblemSpec, Region, Transform,
};
use crate::geometry::{deform, DisplacementField, Mat2, Mesh, Point, Tag};
use crate::linalg::{CsrMatrix, TripletBuilder};
use crate::quadrature::{edge_gauss, VolumeRule};
use crate::spectrum::{cluster_eigen, solve_eigen, EigenGroup, EigenSolution};

fn sym(g: &Mat2) -> Mat2 {
    let o = 0.5 * (g[0][1] + g[1][0]);
    [[g[0][0], o], [o, g[1][1]]]
}

fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

fn quad(u: Point, m: &Mat2, v: Point) -> f64 {
    u[0] * (m[0][0] * v[0] + m[0][1] * v[1]) + u[1] * (m[1][0] * v[0] + m[1][1] * v[1])
}

/// Pointwise derivative of `∇uᵀ F⁻¹ C F⁻ᵀ ∇v |det F|` at `F = I` in the
/// direction `G = ∇ψ`: `div ψ ∇uᵀC∇v - ∇uᵀ(GC + CGᵀ)∇v`.
pub fn stiffness_derivative_density(grad_u: Point, grad_v: Point, jac: &Mat2, coeff: &Mat2) -> f64 {
    let div = jac[0][0] + jac[1][1];
    let gc = mat_mul(jac, coeff);
    let mut m = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            // (GC)ᵢⱼ + (CGᵀ)ᵢⱼ = (GC)ᵢⱼ + (GC)ⱼᵢ for symmetric C
            m[i][j] = gc[i][j] + gc[j][i];
        }
    }
    div * quad(grad_u, coeff, grad_v) - quad(grad_u, &m, grad_v)
}

/// Rate of change of boundary arc length: `div ψ - νᵀ∇ψν`.
pub fn boundary_stretch_rate(jac: &Mat2, normal: Point) -> f64 {
    let s = sym(jac);
    (jac[0][0] + jac[1][1]) - quad(normal, &s, normal)
}

/// Derivative of the stiffness form `∫ C∇u·∇v`.
pub fn d_stiffness(mesh: &Mesh, psi: &DisplacementField, coeff: &MatrixField, rule: VolumeRule) -> CsrMatrix {
    let constant = coeff.as_constant();
    let mut out = TripletBuilder::new(mesh.num_vertices());
    for t in 0..mesh.triangles().len() {
        let (g, area) = element_gradients(mesh, t);
        let mut ke = [[0.0; 3]; 3];
        for (l, w) in rule.points() {
            let x = bary_point(mesh, t, *l);
            let jac = psi.jacobian(x);
            let c = constant.unwrap_or_else(|| coeff.eval(Site::volume(x)));
            for i in 0..3 {
                for j in 0..3 {
                    ke[i][j] += w * area * stiffness_derivative_density(g[i], g[j], &jac, &c);
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
    out.build()
}

/// Derivative of `∫_region w uv dσ`.
pub fn d_boundary_mass(mesh: &Mesh, region: Region, weight: &ScalarField, psi: &DisplacementField) -> CsrMatrix {
    let mut out = TripletBuilder::new(mesh.num_vertices());
    for e in mesh.boundary().iter().filter(|e| region.contains(e.tag)) {
        let len = mesh.edge_length(e);
        let nu = mesh.outward_normal(e);
        let mut me = [[0.0; 2]; 2];
        for (s, gw) in edge_gauss() {
            let x = edge_point(mesh, e.a, e.b, s);
            let rate = boundary_stretch_rate(&psi.jacobian(x), nu);
            let w = weight.eval(Site::edge(x, e.tag));
            let phi = [1.0 - s, s];
            for i in 0..2 {
                for j in 0..2 {
                    me[i][j] += gw * len * w * rate * phi[i] * phi[j];
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
    out.build()
}

/// Derivative of `∫_Ω w uv dx`.
pub fn d_volume_mass(mesh: &Mesh, weight: &ScalarField, psi: &DisplacementField, rule: VolumeRule) -> CsrMatrix {
    let mut out = TripletBuilder::new(mesh.num_vertices());
    for t in 0..mesh.triangles().len() {
        let area = mesh.triangle_area(t);
        let mut me = [[0.0; 3]; 3];
        for (l, qw) in rule.points() {
            let x = bary_point(mesh, t, *l);
            let c = qw * area * weight.eval(Site::volume(x)) * psi.divergence(x);
            for i in 0..3 {
                for j in 0..3 {
                    me[i][j] += c * l[i] * l[j];
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
    out.build()
}

fn is_identity(j: &Mat2, t: f64) -> bool {
    t == 0.0 || j.iter().flatten().all(|&v| v == 0.0)
}

fn inverse(f: &Mat2) -> (Mat2, f64) {
    let det = f[0][0] * f[1][1] - f[0][1] * f[1][0];
    (
        [[f[1][1] / det, -f[0][1] / det], [-f[1][0] / det, f[0][0] / det]],
        det,
    )
}

/// Stiffness pulled back from the deformed domain: integrand
/// `∇uᵀ F⁻¹ C F⁻ᵀ ∇v |det F|` with `F = I + t∇ψ` at the quadrature points.
pub fn pullback_stiffness(
    mesh: &Mesh,
    psi: &DisplacementField,
    coeff: &MatrixField,
    t: f64,
    rule: VolumeRule,
) -> Result<CsrMatrix> {
    let transform = |el: usize, x: Point| -> Result<Transform> {
        let j = psi.jacobian(x);
        if is_identity(&j, t) {
            return Ok(None);
        }
        let f = [[1.0 + t * j[0][0], t * j[0][1]], [t * j[1][0], 1.0 + t * j[1][1]]];
        let (finv, det) = inverse(&f);
        if !(det > 0.0) {
            return Err(Error::Deformation { element: el, measure: det });
        }
        Ok(Some((finv, det)))
    };
    stiffness_kernel(mesh, coeff, rule, false, &transform)
}

/// Boundary mass pulled back: each Gauss point is weighted by the local
/// arc-length stretch `|(I + t∇ψ)τ|`.
pub fn pullback_boundary_mass(
    mesh: &Mesh,
    region: Region,
    weight: &ScalarField,
    psi: &DisplacementField,
    t: f64,
) -> Result<CsrMatrix> {
    let stretch = |k: usize, s: f64| -> Result<Option<f64>> {
        let e = &mesh.boundary()[k];
        let x = edge_point(mesh, e.a, e.b, s);
        let j = psi.jacobian(x);
        if is_identity(&j, t) {
            return Ok(None);
        }
        let nu = mesh.outward_normal(e);
        let tau = [-nu[1], nu[0]];
        let d = [
            tau[0] + t * (j[0][0] * tau[0] + j[0][1] * tau[1]),
            tau[1] + t * (j[1][0] * tau[0] + j[1][1] * tau[1]),
        ];
        let len = d[0].hypot(d[1]);
        if !(len > 0.0) {
            return Err(Error::Deformation {
                element: e.triangle,
                measure: len,
            });
        }
        Ok(Some(len))
    };
    boundary_mass_kernel(mesh, region, weight, &stretch)
}

/// Volume mass pulled back: weight `|det(I + t∇ψ)|`.
pub fn pullback_volume_mass(
    mesh: &Mesh,
    weight: &ScalarField,
    psi: &DisplacementField,
    t: f64,
    rule: VolumeRule,
) -> Result<CsrMatrix> {
    let factor = |el: usize, x: Point| -> Result<Option<f64>> {
        let j = psi.jacobian(x);
        if is_identity(&j, t) {
            return Ok(None);
        }
        let det = (1.0 + t * j[0][0]) * (1.0 + t * j[1][1]) - t * t * j[0][1] * j[1][0];
        if !(det > 0.0) {
            return Err(Error::Deformation { element: el, measure: det });
        }
        Ok(Some(det))
    };
    volume_mass_kernel(mesh, weight, rule, &factor)
}

/// All four derivative matrices for one field.
#[derive(Debug, Clone)]
pub struct DerivativeForms {
    pub d_stiff: CsrMatrix,
    pub d_bmass_all: CsrMatrix,
    pub d_bmass_s: CsrMatrix,
    pub d_vmass: CsrMatrix,
}

impl DerivativeForms {
    pub fn new(mesh: &Mesh, spec: &ProblemSpec, psi: &DisplacementField) -> Self {
        let one = ScalarField::constant(1.0);
        let a = spec.effective_potential();
        DerivativeForms {
            d_stiff: d_stiffness(mesh, psi, &spec.effective_conductivity(), spec.quadrature),
            d_bmass_all: d_boundary_mass(mesh, Region::All, &a, psi),
            d_bmass_s: d_boundary_mass(mesh, Region::S, &one, psi),
            d_vmass: d_volume_mass(mesh, &a, psi, spec.quadrature),
        }
    }

    pub fn matrices(&self) -> [(&'static str, &CsrMatrix); 4] {
        [
            ("stiffness", &self.d_stiff),
            ("boundary_mass_all", &self.d_bmass_all),
            ("boundary_mass_s", &self.d_bmass_s),
            ("volume_mass", &self.d_vmass),
        ]
    }
}

/// Derivatives `(dA, dB)` of the pencil.
pub fn pencil_derivative(mesh: &Mesh, spec: &ProblemSpec, psi: &DisplacementField) -> (CsrMatrix, CsrMatrix) {
    let a = spec.effective_potential();
    let d_k = d_stiffness(mesh, psi, &spec.effective_conductivity(), spec.quadrature);
    let d_mass = if spec.variant.boundary_mass() {
        d_boundary_mass(mesh, Region::All, &a, psi)
    } else {
        d_volume_mass(mesh, &a, psi, spec.quadrature)
    };
    let d_b = d_boundary_mass(mesh, Region::S, &ScalarField::constant(1.0), psi);
    (d_k.add_scaled(1.0, &d_mass), d_b)
}

/// Symmetric `m×m` matrix `M = Xᵀ(dB - μ̄ dA)X` over a degenerate group.
#[derive(Debug, Clone, Serialize)]
pub struct PerturbationMatrix {
    pub members: Vec<usize>,
    pub lambda_bar: f64,
    pub mu_bar: f64,
    #[serde(serialize_with = "serialize_dmatrix")]
    pub matrix: DMatrix<f64>,
    pub deviation: f64,
}

fn serialize_dmatrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    rows.serialize(s)
}

impl PerturbationMatrix {
    /// `M = Xᵀ(dB - μ̄ dA)X`; either derivative may be absent (zero).
    pub fn from_pencil(
        sol: &EigenSolution,
        group: &EigenGroup,
        d_a: Option<&CsrMatrix>,
        d_b: Option<&CsrMatrix>,
    ) -> Result<Self> {
        check_group(sol, group)?;
        let x = sol.group_vectors(group);
        let mu_bar = group.mu(sol);
        let m = group.multiplicity;
        let mut mat = DMatrix::zeros(m, m);
        if let Some(d_b) = d_b {
            mat += d_b.sandwich(&x, &x);
        }
        if let Some(d_a) = d_a {
            mat -= mu_bar * d_a.sandwich(&x, &x);
        }
        Ok(Self::from_matrix(sol, group, mat))
    }

    pub fn from_matrix(sol: &EigenSolution, group: &EigenGroup, mat: DMatrix<f64>) -> Self {
        let mu_bar = group.mu(sol);
        let matrix = 0.5 * (&mat + mat.transpose());
        PerturbationMatrix {
            members: group.members.clone(),
            lambda_bar: 1.0 / mu_bar,
            mu_bar,
            deviation: nosplit_deviation(&matrix),
            matrix,
        }
    }

    /// Largest off-diagonal magnitude.
    pub fn max_off_diagonal(&self) -> f64 {
        let m = self.matrix.nrows();
        (0..m)
            .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.matrix[(i, j)].abs())
            .fold(0.0, f64::max)
    }

    /// `ρ = tr M / m`.
    pub fn rho(&self) -> f64 {
        self.matrix.trace() / self.matrix.nrows() as f64
    }
}

pub(crate) fn check_group(sol: &EigenSolution, group: &EigenGroup) -> Result<()> {
    if group.members.is_empty() || group.members.iter().any(|&i| i >= sol.len()) {
        return Err(Error::Argument(format!(
            "group {:?} does not index a solution with {} modes",
            group.members,
            sol.len()
        )));
    }
    if group.members.len() != group.multiplicity {
        return Err(Error::Argument("group multiplicity does not match its members".into()));
    }
    Ok(())
}

/// The shape perturbation matrix of `ψ` for a group of `sol`.
pub fn perturbation_matrix(
    mesh: &Mesh,
    spec: &ProblemSpec,
    sol: &EigenSolution,
    group: &EigenGroup,
    psi: &DisplacementField,
) -> Result<PerturbationMatrix> {
    if sol.vectors.nrows() != mesh.num_vertices() {
        return Err(Error::Argument("solution does not belong to this mesh".into()));
    }
    let (d_a, d_b) = pencil_derivative(mesh, spec, psi);
    PerturbationMatrix::from_pencil(sol, group, Some(&d_a), Some(&d_b))
}

/// `‖M - (tr M/m) I‖_F`.
pub fn nosplit_deviation(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    let rho = m.trace() / n as f64;
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = m[(i, j)] - if i == j { rho } else { 0.0 };
            s += d * d;
        }
    }
    s.sqrt()
}

/// First-order eigenvalue slopes `dλ = -λ̄² · eig(M)`, ascending.
pub fn predict_splitting(pm: &PerturbationMatrix) -> Vec<f64> {
    let eig = SymmetricEigen::new(pm.matrix.clone());
    let l2 = pm.lambda_bar * pm.lambda_bar;
    let mut s: Vec<f64> = eig.eigenvalues.iter().map(|d| -l2 * d).collect();
    s.sort_by(f64::total_cmp);
    s
}

/// Eigenvectors of `M` ordered by predicted slope (ascending), so that
/// column `i` is the direction of branch `i`.
pub fn splitting_directions(pm: &PerturbationMatrix) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(pm.matrix.clone());
    let mut idx: Vec<usize> = (0..pm.matrix.nrows()).collect();
    // slope = -λ̄² d, so ascending slope is descending d
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    eig.eigenvectors.select_columns(&idx)
}

/// One pullback-vs-derivative comparison.
#[derive(Debug, Clone, Serialize)]
pub struct LemmaRow {
    pub form: String,
    pub step: f64,
    /// `‖FD - D‖_F / ‖D‖_F` (absolute when `D = 0`).
    pub residual: f64,
    pub order: Option<f64>,
    /// Residual at rounding level.
    pub exact: bool,
}

const EXACT_RESIDUAL: f64 = 1e-11;

/// Central differences of the pullback assemblies against the derivative
/// matrices for `ψ`, over the given steps (descending).
pub fn pullback_fd_check(
    mesh: &Mesh,
    spec: &ProblemSpec,
    psi: &DisplacementField,
    steps: &[f64],
) -> Result<Vec<LemmaRow>> {
    let forms = DerivativeForms::new(mesh, spec, psi);
    let coeff = spec.effective_conductivity();
    let a = spec.effective_potential();
    let one = ScalarField::constant(1.0);
    type Pull<'a> = Box<dyn Fn(f64) -> Result<CsrMatrix> + 'a>;
    let pulls: [(&str, &CsrMatrix, Pull); 4] = [
        (
            "stiffness",
            &forms.d_stiff,
            Box::new(|t| pullback_stiffness(mesh, psi, &coeff, t, spec.quadrature)),
        ),
        (
            "boundary_mass_all",
            &forms.d_bmass_all,
            Box::new(|t| pullback_boundary_mass(mesh, Region::All, &a, psi, t)),
        ),
        (
            "boundary_mass_s",
            &forms.d_bmass_s,
            Box::new(|t| pullback_boundary_mass(mesh, Region::S, &one, psi, t)),
        ),
        (
            "volume_mass",
            &forms.d_vmass,
            Box::new(|t| pullback_volume_mass(mesh, &a, psi, t, spec.quadrature)),
        ),
    ];
    let mut rows = Vec::new();
    for (name, d, pull) in pulls.iter() {
        let scale = d.frobenius();
        let mut prev: Option<(f64, f64)> = None;
        for &h in steps {
            let fd = pull(h)?.add_scaled(-1.0, &pull(-h)?).scaled(0.5 / h);
            let err = fd.add_scaled(-1.0, d).frobenius();
            let residual = if scale > 0.0 { err / scale } else { err };
            let exact = residual < EXACT_RESIDUAL;
            let order = match prev {
                Some((ph, pr)) if !exact && pr >= EXACT_RESIDUAL => Some((pr / residual).ln() / (ph / h).ln()),
                _ => None,
            };
            rows.push(LemmaRow {
                form: name.to_string(),
                step: h,
                residual,
                order,
                exact,
            });
            prev = Some((h, residual));
        }
    }
    Ok(rows)
}

/// One branch at one step of an eigenvalue finite-difference check.
#[derive(Debug, Clone, Serialize)]
pub struct FdRow {
    pub step: f64,
    pub branch: usize,
    pub fd_slope: f64,
    pub predicted: f64,
    pub rel_err: f64,
    pub order: Option<f64>,
    /// Branch left the tracked subspace (possible crossing).
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FdReport {
    pub lambda_bar: f64,
    pub predicted: Vec<f64>,
    pub rows: Vec<FdRow>,
}

impl FdReport {
    pub fn rows_at(&self, step: f64) -> impl Iterator<Item = &FdRow> {
        self.rows.iter().filter(move |r| r.step == step)
    }

    /// Largest relative error at `step`, measured against the largest
    /// predicted slope magnitude (or the eigenvalue when all slopes vanish).
    pub fn max_error(&self, step: f64) -> f64 {
        let scale = self.predicted.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        let scale = if scale > 0.0 { scale } else { self.lambda_bar };
        self.rows_at(step)
            .map(|r| (r.fd_slope - r.predicted).abs() / scale)
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,branch,fd_slope,predicted,rel_err,order,flagged\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:e},{},{:.12e},{:.12e},{:.6e},{},{}\n",
                r.step,
                r.branch,
                r.fd_slope,
                r.predicted,
                r.rel_err,
                r.order.map_or(String::new(), |o| format!("{o:.4}")),
                r.flagged
            ));
        }
        s
    }
}

/// Solves on a perturbed pencil and returns the window eigenvalues matched
/// to reference directions `v` (columns, `A₀`-orthonormal) by overlap.
pub(crate) fn matched_branches(
    sol_t: &EigenSolution,
    a0: &CsrMatrix,
    window: &[usize],
    v: &DMatrix<f64>,
) -> (Vec<f64>, Vec<bool>) {
    let w = sol_t.vectors.select_columns(window);
    // overlaps |⟨v_i, x_j(t)⟩_A₀|²
    let o = a0.sandwich(v, &w).map(|x| x * x);
    let m = window.len();
    let assignment = best_assignment(&o);
    let lam = (0..m).map(|i| sol_t.lambda[window[assignment[i]]]).collect();
    let flags = (0..m).map(|i| o[(i, assignment[i])] < 0.25).collect();
    (lam, flags)
}

/// Permutation maximizing `Σ_i o[i, p(i)]` (exhaustive for small `m`,
/// greedy otherwise); ties keep the identity order.
fn best_assignment(o: &DMatrix<f64>) -> Vec<usize> {
    let m = o.nrows();
    if m <= 6 {
        let mut best = (f64::NEG_INFINITY, (0..m).collect::<Vec<_>>());
        let mut perm: Vec<usize> = (0..m).collect();
        permute(&mut perm, 0, &mut |p| {
            let s: f64 = (0..m).map(|i| o[(i, p[i])]).sum();
            if s > best.0 + 1e-12 {
                best = (s, p.to_vec());
            }
        });
        best.1
    } else {
        let mut used = vec![false; m];
        (0..m)
            .map(|i| {
                let j = (0..m)
                    .filter(|&j| !used[j])
                    .max_by(|&a, &b| o[(i, a)].total_cmp(&o[(i, b)]))
                    .unwrap();
                used[j] = true;
                j
            })
            .collect()
    }
}

fn permute(p: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
    if k == p.len() {
        f(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, f);
        p.swap(k, i);
    }
}

fn require_constant_coefficients(spec: &ProblemSpec) -> Result<()> {
    let pot = spec.effective_potential().as_constant().is_some();
    let cond = spec.effective_conductivity().as_constant().is_some();
    if pot && cond {
        Ok(())
    } else {
        Err(Error::NotApplicable(
            "re-meshing moves coefficients with space while the derivative moves them with the material; use constant coefficients".into(),
        ))
    }
}

/// Re-meshes by `deform(mesh, ψ, ±t)`, re-solves and central-differences the
/// group's branches. Branches are matched to the splitting directions of `M`
/// by `A`-overlap; a branch whose best overlap falls below one half is
/// flagged as a possible crossing.
pub fn fd_eigenvalue_check(
    mesh: &Mesh,
    spec: &ProblemSpec,
    psi: &DisplacementField,
    group: &EigenGroup,
    steps: &[f64],
) -> Result<FdReport> {
    require_constant_coefficients(spec)?;
    let k = group.members.iter().max().map_or(0, |m| m + 1);
    let pair = assemble_problem(mesh, spec)?;
    let sol = solve_eigen(&pair, k)?;
    let pm = perturbation_matrix(mesh, spec, &sol, group, psi)?;
    let predicted = predict_splitting(&pm);
    let v = sol.group_vectors(group) * splitting_directions(&pm);
    fd_branches(&pair.a, &pm.members, &v, predicted, pm.lambda_bar, steps, |t| {
        let m = deform(mesh, psi, t)?;
        solve_eigen(&assemble_problem(&m, spec)?, k)
    })
}

pub(crate) fn fd_branches(
    a0: &CsrMatrix,
    window: &[usize],
    v: &DMatrix<f64>,
    predicted: Vec<f64>,
    lambda_bar: f64,
    steps: &[f64],
    solve_at: impl Fn(f64) -> Result<EigenSolution>,
) -> Result<FdReport> {
    let m = window.len();
    let scale = predicted.iter().fold(0.0f64, |s, p| s.max(p.abs()));
    let mut rows = Vec::new();
    let mut prev: Vec<Option<(f64, f64)>> = vec![None; m];
    for &h in steps {
        let (lp, fp) = matched_branches(&solve_at(h)?, a0, window, v);
        let (lm, fm) = matched_branches(&solve_at(-h)?, a0, window, v);
        for b in 0..m {
            let fd = (lp[b] - lm[b]) / (2.0 * h);
            let err = (fd - predicted[b]).abs();
            let rel_err = if scale > 0.0 { err / scale } else { err / lambda_bar };
            let order = prev[b].and_then(|(ph, pe)| {
                (pe > 0.0 && err > 0.0).then(|| (pe / err).ln() / (ph / h).ln())
            });
            prev[b] = Some((h, err));
            rows.push(FdRow {
                step: h,
                branch: b,
                fd_slope: fd,
                predicted: predicted[b],
                rel_err,
                order,
                flagged: fp[b] || fm[b],
            });
        }
    }
    Ok(FdReport {
        lambda_bar,
        predicted,
        rows,
    })
}

/// Values of `∇_W e_r · ∇_W e_s + e_r e_s` on one `W` edge.
#[derive(Debug, Clone, Serialize)]
pub struct WEdgeValue {
    pub r: usize,
    pub s: usize,
    pub edge: usize,
    pub midpoint: Point,
    /// Average over the edge.
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct WScanReport {
    pub values: Vec<WEdgeValue>,
    /// Per pair `(r, s)`: L² norm over `W` of the tangential-gradient product,
    /// of the trace product, and of their sum.
    pub summary: Vec<(usize, usize, f64, f64, f64)>,
}

/// Exploratory scan of the tangential identity on `W` for volume-mass
/// variants; nothing is asserted about the values.
pub fn w_obstruction_scan(mesh: &Mesh, spec: &ProblemSpec, sol: &EigenSolution, group: &EigenGroup) -> Result<WScanReport> {
    if spec.variant.boundary_mass() {
        return Err(Error::NotApplicable(
            "the W scan applies to volume-mass variants only".into(),
        ));
    }
    check_group(sol, group)?;
    let mut values = Vec::new();
    let mut summary = Vec::new();
    for (ri, &r) in group.members.iter().enumerate() {
        for &s in &group.members[ri + 1..] {
            let (er, es) = (sol.vectors.column(r), sol.vectors.column(s));
            let (mut ng, mut nt, mut nsum) = (0.0, 0.0, 0.0);
            for (k, e) in mesh.boundary().iter().enumerate().filter(|(_, e)| e.tag == Tag::W) {
                let len = mesh.edge_length(e);
                let gr = (er[e.b] - er[e.a]) / len;
                let gs = (es[e.b] - es[e.a]) / len;
                let mut avg = 0.0;
                for (q, w) in edge_gauss() {
                    let ur = er[e.a] * (1.0 - q) + er[e.b] * q;
                    let us = es[e.a] * (1.0 - q) + es[e.b] * q;
                    let grad = gr * gs;
                    let trace = ur * us;
                    ng += w * len * grad * grad;
                    nt += w * len * trace * trace;
                    nsum += w * len * (grad + trace).powi(2);
                    avg += w * (grad + trace);
                }
                values.push(WEdgeValue {
                    r,
                    s,
                    edge: k,
                    midpoint: edge_point(mesh, e.a, e.b, 0.5),
                    value: avg,
                });
            }
            summary.push((r, s, f64::sqrt(ng), f64::sqrt(nt), f64::sqrt(nsum)));
        }
    }
    Ok(WScanReport { values, summary })
}

/// Groups of the first `count` eigenvalues at `rel_tol`.
pub fn leading_groups(sol: &EigenSolution, count: usize, rel_tol: f64) -> Vec<EigenGroup> {
    let n = count.min(sol.len());
    cluster_eigen(&sol.lambda[..n], rel_tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::{assemble_boundary_mass, assemble_stiffness, assemble_volume_mass, Variant};
    use crate::geometry::{build_annulus, build_rectangle, field_library, params, Support};
    use proptest::prelude::*;

    fn annulus() -> Mesh {
        build_annulus(0.5, 1.0, 4, 32).unwrap()
    }

    fn rect() -> Mesh {
        build_rectangle(2.0, 1.0, 6, 3, |p, q| if p[1] > 0.99 && q[1] > 0.99 { Tag::S } else { Tag::W }).unwrap()
    }

    fn bump() -> DisplacementField {
        field_library("radial_bump", &params(&[("k", 2.0), ("r_start", 0.5), ("r_end", 1.0), ("power", 3.0), ("amplitude", 0.1)])).unwrap()
    }

    #[test]
    fn rigid_fields_give_exact_zeros() {
        for mesh in [annulus(), rect()] {
            for psi in [
                field_library("constant", &params(&[("vx", 0.3), ("vy", -0.2)])).unwrap(),
                field_library("rotation", &params(&[("cx", 0.1)])).unwrap(),
            ] {
                for v in [Variant::P1, Variant::P2] {
                    let f = DerivativeForms::new(&mesh, &ProblemSpec::new(v), &psi);
                    for (name, m) in f.matrices() {
                        assert_eq!(m.max_abs(), 0.0, "{name}");
                    }
                }
            }
        }
    }

    #[test]
    fn dilation_identities() {
        let m = annulus();
        let dil = field_library("dilation", &params(&[])).unwrap();
        let one = ScalarField::constant(1.0);
        let db = d_boundary_mass(&m, Region::All, &one, &dil);
        let b = assemble_boundary_mass(&m, Region::All, &one);
        assert!(db.add_scaled(-1.0, &b).max_abs() <= 1e-14 * b.max_abs());
        let dv = d_volume_mass(&m, &one, &dil, VolumeRule::Degree2);
        let v = assemble_volume_mass(&m, &one, VolumeRule::Degree2);
        assert!(dv.add_scaled(-2.0, &v).max_abs() <= 1e-14 * v.max_abs());
        // isotropic stiffness is scale invariant in 2D
        let k0 = assemble_stiffness(&m, &MatrixField::identity(), VolumeRule::Degree2).unwrap();
        let kt = pullback_stiffness(&m, &dil, &MatrixField::identity(), 0.01, VolumeRule::Degree2).unwrap();
        assert!(kt.add_scaled(-1.0, &k0).max_abs() <= 1e-10 * k0.max_abs());
        assert!(d_stiffness(&m, &dil, &MatrixField::identity(), VolumeRule::Degree2).max_abs() < 1e-12 * k0.max_abs());
    }

    #[test]
    fn pullbacks_at_zero_and_under_translation_are_exact() {
        let m = annulus();
        let one = ScalarField::constant(1.0);
        let id = MatrixField::identity();
        let k0 = assemble_stiffness(&m, &id, VolumeRule::Degree2).unwrap();
        let shift = field_library("constant", &params(&[("vx", 1.0)])).unwrap();
        for (psi, t) in [(bump(), 0.0), (shift, 0.3)] {
            assert_eq!(pullback_stiffness(&m, &psi, &id, t, VolumeRule::Degree2).unwrap(), k0);
            assert_eq!(
                pullback_boundary_mass(&m, Region::S, &one, &psi, t).unwrap(),
                assemble_boundary_mass(&m, Region::S, &one)
            );
            assert_eq!(
                pullback_volume_mass(&m, &one, &psi, t, VolumeRule::Degree2).unwrap(),
                assemble_volume_mass(&m, &one, VolumeRule::Degree2)
            );
        }
    }

    #[test]
    fn fd_of_pullbacks_converges() {
        let m = annulus();
        let rows = pullback_fd_check(&m, &ProblemSpec::new(Variant::P1), &bump(), &[1e-2, 5e-3, 2.5e-3]).unwrap();
        for r in rows.iter().filter(|r| r.step == 2.5e-3) {
            assert!(r.exact || (r.order.unwrap() > 1.9 && r.residual < 1e-5), "{r:?}");
        }
    }

    #[test]
    fn deviation_examples() {
        let m3 = DMatrix::<f64>::identity(4, 4) * 3.0;
        assert_eq!(nosplit_deviation(&m3), 0.0);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -1.0]));
        assert!((nosplit_deviation(&d) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rotation_matrix_vanishes_on_group() {
        let m = annulus();
        let spec = ProblemSpec::new(Variant::P1);
        let sol = solve_eigen(&assemble_problem(&m, &spec).unwrap(), 3).unwrap();
        let g = &leading_groups(&sol, 3, 1e-8)[1];
        let rot = field_library("rotation", &params(&[])).unwrap();
        let pm = perturbation_matrix(&m, &spec, &sol, g, &rot).unwrap();
        assert_eq!(pm.matrix.amax(), 0.0);
        assert!(predict_splitting(&pm).iter().all(|&s| s == 0.0));
        let bad = EigenGroup {
            members: vec![5, 6],
            lambda: 1.0,
            multiplicity: 2,
            tolerance: 1e-8,
        };
        assert!(matches!(perturbation_matrix(&m, &spec, &sol, &bad, &rot), Err(Error::Argument(_))));
    }

    #[test]
    fn w_scan_applicability() {
        let m = annulus();
        let p1 = ProblemSpec::new(Variant::P1);
        let sol = solve_eigen(&assemble_problem(&m, &p1).unwrap(), 3).unwrap();
        let g = &leading_groups(&sol, 3, 1e-8)[1];
        assert!(matches!(w_obstruction_scan(&m, &p1, &sol, g), Err(Error::NotApplicable(_))));
        let p2 = ProblemSpec::new(Variant::P2);
        let sol = solve_eigen(&assemble_problem(&m, &p2).unwrap(), 3).unwrap();
        let groups = leading_groups(&sol, 3, 1e-8);
        let simple = w_obstruction_scan(&m, &p2, &sol, &groups[0]).unwrap();
        assert!(simple.values.is_empty() && simple.summary.is_empty());
        let pair = w_obstruction_scan(&m, &p2, &sol, &groups[1]).unwrap();
        assert_eq!(pair.values.len(), 32);
    }

    #[test]
    fn support_contract_of_interior_bump_kills_boundary_terms() {
        let m = annulus();
        let psi = field_library("interior_bump", &params(&[("cx", 0.75), ("radius", 0.2)])).unwrap();
        assert_eq!(psi.support, Support::Interior);
        let f = DerivativeForms::new(&m, &ProblemSpec::new(Variant::P1), &psi);
        assert_eq!(f.d_bmass_all.max_abs(), 0.0);
        assert!(f.d_stiff.max_abs() > 0.0);
    }

    proptest! {
        #[test]
        fn derivative_assemblers_are_linear(a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let m = build_annulus(0.5, 1.0, 2, 16).unwrap();
            let f = bump();
            let g = field_library("axis_field", &params(&[("component", 1.0), ("coordinate", 1.0), ("start", -1.0), ("end", 1.0), ("profile", 2.0)])).unwrap();
            let spec = ProblemSpec::new(Variant::P1);
            let combo = DisplacementField::combine(&[(a, &f), (b, &g)]);
            let (fc, ff, fg) = (DerivativeForms::new(&m, &spec, &combo), DerivativeForms::new(&m, &spec, &f), DerivativeForms::new(&m, &spec, &g));
            for ((c, x), y) in fc.matrices().iter().zip(ff.matrices()).zip(gf_mats(&fg)) {
                let rhs = x.1.scaled(a).add_scaled(b, y);
                let scale = x.1.max_abs().max(y.max_abs()) * (a.abs() + b.abs()) + 1e-300;
                prop_assert!(c.1.add_scaled(-1.0, &rhs).max_abs() <= 1e-12 * scale);
            }
        }
    }

    fn gf_mats(f: &DerivativeForms) -> [&CsrMatrix; 4] {
        [&f.d_stiff, &f.d_bmass_all, &f.d_bmass_s, &f.d_vmass]
    }
}
