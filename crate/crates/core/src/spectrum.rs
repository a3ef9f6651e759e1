//! Generalized symmetric eigensolver for the pencil `(A, B)`, multiplicity
//! clustering and a Monte-Carlo check of the variational characterization.
//!
//! `B` is supported on the vertices of `S` only, so the solver eliminates
//! the remaining unknowns first: with `A` split into rest (`r`) and support
//! (`s`) blocks, the finite eigenpairs of the pencil are those of
//! `(A_ss - A_sr A_rr⁻¹ A_rs, B_ss)`, lifted back by `x_r = -A_rr⁻¹ A_rs x_s`.
//! This is a Cholesky reduction of `A` with the support ordered last.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::forms::AssembledPair;
use crate::geometry::Mesh;
use crate::linalg::{CsrMatrix, EnvelopeCholesky};

/// Modes with `μ` below this fraction of the largest are `λ = ∞`.
pub const MU_CUTOFF: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct EigenSolution {
    /// Ascending eigenvalues.
    pub lambda: Vec<f64>,
    /// `μ = 1/λ`, descending.
    pub mu: Vec<f64>,
    /// `A`-orthonormal eigenvectors as columns.
    pub vectors: DMatrix<f64>,
    /// Modes classified as infinite (dimension minus retained finite modes).
    pub discarded: usize,
    /// Number of vertices carrying a nonzero row of `B`.
    pub b_support: usize,
}

impl EigenSolution {
    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    pub fn group_vectors(&self, group: &EigenGroup) -> DMatrix<f64> {
        self.vectors.select_columns(&group.members)
    }
}

/// Solves `A x = λ B x` for the `k` smallest eigenvalues.
pub fn solve_eigen(pair: &AssembledPair, k: usize) -> Result<EigenSolution> {
    let n = pair.a.dim();
    let on_support = pair.b.nonzero_rows();
    let support: Vec<usize> = (0..n).filter(|&i| on_support[i]).collect();
    let rest: Vec<usize> = (0..n).filter(|&i| !on_support[i]).collect();
    let s = support.len();

    // Z = A_rr⁻¹ A_rs and the Schur complement on the support
    let mut z = DMatrix::zeros(rest.len(), s);
    let mut schur = pair.a.dense_block(&support, &support);
    if !rest.is_empty() {
        let a_rr = pair.a.submatrix(&rest);
        let chol = EnvelopeCholesky::factor(&a_rr)?;
        let a_rs = pair.a.dense_block(&rest, &support);
        for c in 0..s {
            let mut col: Vec<f64> = a_rs.column(c).iter().copied().collect();
            chol.solve_in_place(&mut col);
            z.set_column(c, &DVector::from_vec(col));
        }
        schur -= a_rs.transpose() * &z;
        schur = 0.5 * (&schur + schur.transpose());
    }
    let l = schur
        .cholesky()
        .ok_or_else(|| Error::Coercivity("Schur complement of A on the B support is not positive definite".into()))?
        .l();
    let b_ss = pair.b.dense_block(&support, &support);
    // C = L⁻¹ B L⁻ᵀ
    let left = l
        .solve_lower_triangular(&b_ss)
        .ok_or_else(|| Error::Coercivity("singular Cholesky factor".into()))?;
    let c = l
        .solve_lower_triangular(&left.transpose())
        .ok_or_else(|| Error::Coercivity("singular Cholesky factor".into()))?;
    let c = 0.5 * (&c + c.transpose());
    let eig = SymmetricEigen::new(c);
    let mut idx: Vec<usize> = (0..s).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mu_max = idx.first().map_or(0.0, |&i| eig.eigenvalues[i]);
    let finite: Vec<usize> = idx
        .into_iter()
        .filter(|&i| eig.eigenvalues[i] > MU_CUTOFF * mu_max && mu_max > 0.0)
        .collect();
    if k > finite.len() {
        return Err(Error::Rank {
            requested: k,
            available: finite.len(),
            b_rank: s,
        });
    }
    let lt = l.transpose();
    let mut vectors = DMatrix::zeros(n, k);
    let mut mu = Vec::with_capacity(k);
    for (col, &i) in finite.iter().take(k).enumerate() {
        let y = eig.eigenvectors.column(i).into_owned();
        let xs = lt
            .solve_upper_triangular(&y)
            .ok_or_else(|| Error::Coercivity("singular Cholesky factor".into()))?;
        let xr = -(&z * &xs);
        let mut x = DVector::zeros(n);
        for (p, &v) in support.iter().enumerate() {
            x[v] = xs[p];
        }
        for (p, &v) in rest.iter().enumerate() {
            x[v] = xr[p];
        }
        // deterministic sign: largest-magnitude entry positive
        let imax = x.iamax();
        if x[imax] < 0.0 {
            x = -x;
        }
        vectors.set_column(col, &x);
        mu.push(eig.eigenvalues[i]);
    }
    Ok(EigenSolution {
        lambda: mu.iter().map(|m| 1.0 / m).collect(),
        mu,
        vectors,
        discarded: n - finite.len(),
        b_support: s,
    })
}

/// Largest deviations of `XᵀAX` from `I` and of `XᵀBX` from `diag(μ)`.
pub fn orthonormality_defects(pair: &AssembledPair, sol: &EigenSolution) -> (f64, f64) {
    let x = &sol.vectors;
    let xa = pair.a.sandwich(x, x);
    let xb = pair.b.sandwich(x, x);
    let k = sol.len();
    let mut da: f64 = 0.0;
    let mut db: f64 = 0.0;
    for i in 0..k {
        for j in 0..k {
            let id = if i == j { 1.0 } else { 0.0 };
            da = da.max((xa[(i, j)] - id).abs());
            db = db.max((xb[(i, j)] - id * sol.mu[i]).abs());
        }
    }
    (da, db)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EigenGroup {
    pub members: Vec<usize>,
    /// Mean eigenvalue of the members.
    pub lambda: f64,
    pub multiplicity: usize,
    pub tolerance: f64,
}

impl EigenGroup {
    pub fn is_multiple(&self) -> bool {
        self.multiplicity > 1
    }

    /// Mean of `μ` over the members.
    pub fn mu(&self, sol: &EigenSolution) -> f64 {
        self.members.iter().map(|&i| sol.mu[i]).sum::<f64>() / self.multiplicity as f64
    }
}

/// Relative gap `|b - a| / max(|a|, |b|)`.
pub fn relative_gap(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (b - a).abs() / scale
    }
}

/// Single-linkage clustering of the ascending eigenvalues on relative gaps.
pub fn cluster_eigen(lambda: &[f64], rel_tol: f64) -> Vec<EigenGroup> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in 0..lambda.len() {
        match groups.last_mut() {
            Some(g) if relative_gap(lambda[i - 1], lambda[i]) <= rel_tol => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
        .into_iter()
        .map(|members| EigenGroup {
            lambda: members.iter().map(|&i| lambda[i]).sum::<f64>() / members.len() as f64,
            multiplicity: members.len(),
            members,
            tolerance: rel_tol,
        })
        .collect()
}

/// Replaces the group's eigenvectors `X_g` by `X_g Q` for an `m×m` orthogonal `Q`.
pub fn rotate_group(sol: &EigenSolution, group: &EigenGroup, q: &DMatrix<f64>) -> EigenSolution {
    let rotated = sol.group_vectors(group) * q;
    let mut out = sol.clone();
    for (c, &i) in group.members.iter().enumerate() {
        out.vectors.set_column(i, &rotated.column(c));
    }
    out
}

/// Vertex permutation of the reflection `y ↦ -y` (or `x ↦ -x` when
/// `axis = 1`); errors if the mesh is not mirror symmetric.
pub fn mirror_permutation(mesh: &Mesh, axis: usize) -> Result<Vec<usize>> {
    let (lo, hi) = mesh.bounding_box();
    let scale = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let q = |v: f64| (v / scale * 1e9).round() as i64;
    let lookup: HashMap<(i64, i64), usize> = mesh
        .vertices()
        .iter()
        .enumerate()
        .map(|(i, p)| ((q(p[0]), q(p[1])), i))
        .collect();
    mesh.vertices()
        .iter()
        .map(|p| {
            let m = if axis == 0 { [p[0], -p[1]] } else { [-p[0], p[1]] };
            // tolerate the rounding boundary by probing neighbours
            for dx in [0, -1, 1] {
                for dy in [0, -1, 1] {
                    if let Some(&j) = lookup.get(&(q(m[0]) + dx, q(m[1]) + dy)) {
                        return Ok(j);
                    }
                }
            }
            Err(Error::Argument(format!("mesh is not mirror symmetric at {p:?}")))
        })
        .collect()
}

/// Orthogonal `Q` diagonalizing the mirror symmetry on the group:
/// the columns of `X_g Q` are even (first) or odd under the reflection.
pub fn mirror_adapted_basis(
    a: &CsrMatrix,
    sol: &EigenSolution,
    group: &EigenGroup,
    perm: &[usize],
) -> DMatrix<f64> {
    let x = sol.group_vectors(group);
    let mut px = DMatrix::zeros(x.nrows(), x.ncols());
    for (i, &j) in perm.iter().enumerate() {
        px.set_row(j, &x.row(i));
    }
    let r = a.sandwich(&x, &px);
    let r = 0.5 * (&r + r.transpose());
    let eig = SymmetricEigen::new(r);
    let mut idx: Vec<usize> = (0..x.ncols()).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    eig.eigenvectors.select_columns(&idx)
}

#[derive(Debug, Clone, Serialize)]
pub struct MinMaxLevel {
    /// Number of leading eigenvectors deflated plus one.
    pub level: usize,
    pub bound: f64,
    pub max_observed: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MinMaxViolation {
    pub trial: usize,
    /// Seed of the generator that produced the offending vector.
    pub seed: u64,
    pub level: usize,
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MinMaxReport {
    pub trials: usize,
    pub levels: Vec<MinMaxLevel>,
    /// Rayleigh quotient of the first eigenvector.
    pub first_vector_rayleigh: f64,
    pub violations: Vec<MinMaxViolation>,
}

impl MinMaxReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

const MINMAX_SLACK: f64 = 1e-10;

/// Random `A`-normalized trial vectors never exceed `μ_1`, and after
/// `A`-orthogonalization against the first `t - 1` eigenvectors never
/// exceed `μ_t`. Checks levels `1..=min(levels, k)`.
pub fn minmax_check(
    pair: &AssembledPair,
    sol: &EigenSolution,
    trials: usize,
    levels: usize,
    seed: u64,
) -> MinMaxReport {
    let n = pair.a.dim();
    let levels = levels.min(sol.len());
    let mut out: Vec<MinMaxLevel> = (1..=levels)
        .map(|t| MinMaxLevel {
            level: t,
            bound: sol.mu[t - 1],
            max_observed: f64::NEG_INFINITY,
        })
        .collect();
    let ax: Vec<DVector<f64>> = (0..levels)
        .map(|j| pair.a.mul_dvec(&sol.vectors.column(j).into_owned()))
        .collect();
    let mut violations = Vec::new();
    for trial in 0..trials {
        let s = seed.wrapping_add(trial as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let base = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        for lvl in out.iter_mut() {
            let mut phi = base.clone();
            for j in 0..lvl.level - 1 {
                let c = ax[j].dot(&phi);
                phi -= c * sol.vectors.column(j);
            }
            let norm2 = pair.a.quad_form(phi.as_slice());
            if norm2 <= 0.0 {
                continue;
            }
            let value = pair.b.quad_form(phi.as_slice()) / norm2;
            lvl.max_observed = lvl.max_observed.max(value);
            if value > lvl.bound + MINMAX_SLACK {
                violations.push(MinMaxViolation {
                    trial,
                    seed: s,
                    level: lvl.level,
                    value,
                    bound: lvl.bound,
                });
            }
        }
    }
    let first_vector_rayleigh = if sol.is_empty() {
        f64::NAN
    } else {
        let x = sol.vectors.column(0);
        pair.b.quad_form(x.as_slice()) / pair.a.quad_form(x.as_slice())
    };
    MinMaxReport {
        trials,
        levels: out,
        first_vector_rayleigh,
        violations,
    }
}

/// Spectrum table `index,lambda,mu,group,multiplicity`.
pub fn spectrum_csv(sol: &EigenSolution, groups: &[EigenGroup]) -> String {
    let mut owner = vec![(0, 1); sol.len()];
    for (g, grp) in groups.iter().enumerate() {
        for &i in &grp.members {
            owner[i] = (g, grp.multiplicity);
        }
    }
    let mut s = String::from("index,lambda,mu,group,multiplicity\n");
    for i in 0..sol.len() {
        s.push_str(&format!(
            "{},{:.15e},{:.15e},{},{}\n",
            i, sol.lambda[i], sol.mu[i], owner[i].0, owner[i].1
        ));
    }
    s
}
