//! Perturbation matrices for coefficient changes `a ↦ a + b` and
//! `A ↦ A + B` on a fixed domain, with finite-difference validation.

use serde::{Deserialize, Serialize};

use crate::coefficient::{MatrixField, ScalarField};
use crate::error::{Error, Result};
use crate::forms::{
    assemble_boundary_mass, assemble_problem, assemble_stiffness_signed, assemble_volume_mass,
    ProblemSpec, Region, Variant,
};
use crate::geometry::Mesh;
use crate::linalg::CsrMatrix;
use crate::shapederiv::{fd_branches, predict_splitting, splitting_directions, FdReport, PerturbationMatrix};
use crate::spectrum::{solve_eigen, EigenGroup, EigenSolution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "field", rename_all = "snake_case")]
pub enum CoefficientPerturbation {
    /// `b` added to the boundary potential.
    BoundaryPotential(ScalarField),
    /// `b` added to the volume potential.
    VolumePotential(ScalarField),
    /// `B` added to the conductivity.
    MatrixField(MatrixField),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    BoundaryPotential,
    VolumePotential,
    MatrixField,
}

impl CoefficientPerturbation {
    pub fn kind(&self) -> PerturbationKind {
        match self {
            CoefficientPerturbation::BoundaryPotential(_) => PerturbationKind::BoundaryPotential,
            CoefficientPerturbation::VolumePotential(_) => PerturbationKind::VolumePotential,
            CoefficientPerturbation::MatrixField(_) => PerturbationKind::MatrixField,
        }
    }

    /// Sampled sup-norm (spectral norm for matrix fields).
    pub fn sup_estimate(&self, mesh: &Mesh) -> f64 {
        match self {
            CoefficientPerturbation::BoundaryPotential(b) | CoefficientPerturbation::VolumePotential(b) => {
                b.sup_estimate(mesh)
            }
            CoefficientPerturbation::MatrixField(b) => b.sup_estimate(mesh),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        match self {
            CoefficientPerturbation::BoundaryPotential(b) => CoefficientPerturbation::BoundaryPotential(b.scaled(c)),
            CoefficientPerturbation::VolumePotential(b) => CoefficientPerturbation::VolumePotential(b.scaled(c)),
            CoefficientPerturbation::MatrixField(b) => CoefficientPerturbation::MatrixField(MatrixField::Sum {
                terms: vec![(c, b.clone())],
            }),
        }
    }

    /// `Σ c_i p_i` for perturbations of one kind.
    pub fn combine(terms: &[(f64, &CoefficientPerturbation)]) -> Result<Self> {
        let kind = terms
            .first()
            .ok_or_else(|| Error::Argument("empty combination".into()))?
            .1
            .kind();
        if terms.iter().any(|(_, p)| p.kind() != kind) {
            return Err(Error::Argument("cannot combine perturbations of different kinds".into()));
        }
        let scalars = || {
            terms
                .iter()
                .map(|(c, p)| match p {
                    CoefficientPerturbation::BoundaryPotential(b) | CoefficientPerturbation::VolumePotential(b) => {
                        (*c, b.clone())
                    }
                    CoefficientPerturbation::MatrixField(_) => unreachable!(),
                })
                .collect()
        };
        Ok(match kind {
            PerturbationKind::BoundaryPotential => {
                CoefficientPerturbation::BoundaryPotential(ScalarField::Sum { terms: scalars() })
            }
            PerturbationKind::VolumePotential => {
                CoefficientPerturbation::VolumePotential(ScalarField::Sum { terms: scalars() })
            }
            PerturbationKind::MatrixField => CoefficientPerturbation::MatrixField(MatrixField::Sum {
                terms: terms
                    .iter()
                    .map(|(c, p)| match p {
                        CoefficientPerturbation::MatrixField(b) => (*c, b.clone()),
                        _ => unreachable!(),
                    })
                    .collect(),
            }),
        })
    }

    fn check_variant(&self, v: Variant) -> Result<()> {
        let ok = match self.kind() {
            PerturbationKind::BoundaryPotential => matches!(v, Variant::P1 | Variant::P3a),
            PerturbationKind::VolumePotential => matches!(v, Variant::P2 | Variant::P3b),
            PerturbationKind::MatrixField => !matches!(v, Variant::P3a | Variant::P3b),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!(
                "{:?} perturbation does not apply to variant {v:?}",
                self.kind()
            )))
        }
    }

    /// Derivative of `A` in the direction of the perturbation (`B` is unchanged).
    pub fn pencil_derivative(&self, mesh: &Mesh, spec: &ProblemSpec) -> Result<CsrMatrix> {
        self.check_variant(spec.variant)?;
        Ok(match self {
            CoefficientPerturbation::BoundaryPotential(b) => assemble_boundary_mass(mesh, Region::All, b),
            CoefficientPerturbation::VolumePotential(b) => assemble_volume_mass(mesh, b, spec.quadrature),
            CoefficientPerturbation::MatrixField(b) => assemble_stiffness_signed(mesh, b, spec.quadrature)?,
        })
    }

    /// The problem with coefficient `a + t b` (or `A + t B`); base variants
    /// are promoted to their coefficient counterparts.
    pub fn apply(&self, spec: &ProblemSpec, t: f64) -> Result<ProblemSpec> {
        self.check_variant(spec.variant)?;
        let mut out = spec.clone();
        match self {
            CoefficientPerturbation::BoundaryPotential(b) | CoefficientPerturbation::VolumePotential(b) => {
                out.potential = spec.effective_potential().plus(t, b);
                out.variant = if spec.variant.boundary_mass() { Variant::P3a } else { Variant::P3b };
            }
            CoefficientPerturbation::MatrixField(b) => {
                out.conductivity = spec.effective_conductivity().plus(t, b);
                out.variant = if spec.variant.boundary_mass() { Variant::P4a } else { Variant::P4b };
            }
        }
        Ok(out)
    }
}

fn expect_kind(p: &CoefficientPerturbation, kind: PerturbationKind) -> Result<()> {
    if p.kind() == kind {
        Ok(())
    } else {
        Err(Error::Argument(format!("expected a {kind:?} perturbation, got {:?}", p.kind())))
    }
}

/// `M = -μ̄ Xᵀ(dA)X` for any coefficient perturbation.
pub fn coefficient_matrix(
    mesh: &Mesh,
    spec: &ProblemSpec,
    sol: &EigenSolution,
    group: &EigenGroup,
    pert: &CoefficientPerturbation,
) -> Result<PerturbationMatrix> {
    let d_a = pert.pencil_derivative(mesh, spec)?;
    PerturbationMatrix::from_pencil(sol, group, Some(&d_a), None)
}

/// Boundary potential: `M_ij = -μ̄ ∫_∂Ω b e_i e_j dσ`.
pub fn pot_down_matrix(
    mesh: &Mesh,
    spec: &ProblemSpec,
    sol: &EigenSolution,
    group: &EigenGroup,
    b: &CoefficientPerturbation,
) -> Result<PerturbationMatrix> {
    expect_kind(b, PerturbationKind::BoundaryPotential)?;
    coefficient_matrix(mesh, spec, sol, group, b)
}

/// Volume potential: `M_ij = -μ̄ ∫_Ω b e_i e_j dx`.
pub fn pot_up_matrix(
    mesh: &Mesh,
    spec: &ProblemSpec,
    sol: &EigenSolution,
    group: &EigenGroup,
    b: &CoefficientPerturbation,
) -> Result<PerturbationMatrix> {
    expect_kind(b, PerturbationKind::VolumePotential)?;
    coefficient_matrix(mesh, spec, sol, group, b)
}

/// Conductivity: `M_rs = -μ̄ ∫_Ω B∇e_r·∇e_s dx`.
pub fn aniso_matrix(
    mesh: &Mesh,
    spec: &ProblemSpec,
    sol: &EigenSolution,
    group: &EigenGroup,
    b: &CoefficientPerturbation,
) -> Result<PerturbationMatrix> {
    expect_kind(b, PerturbationKind::MatrixField)?;
    coefficient_matrix(mesh, spec, sol, group, b)
}

/// Re-assembles with the perturbed coefficient at `±t`, re-solves and
/// central-differences the group's branches against the prediction.
pub fn coeff_fd_check(
    mesh: &Mesh,
    spec: &ProblemSpec,
    pert: &CoefficientPerturbation,
    group: &EigenGroup,
    steps: &[f64],
) -> Result<FdReport> {
    let k = group.members.iter().max().map_or(0, |m| m + 1);
    let pair = assemble_problem(mesh, spec)?;
    let sol = solve_eigen(&pair, k)?;
    let pm = coefficient_matrix(mesh, spec, &sol, group, pert)?;
    let predicted = predict_splitting(&pm);
    let v = sol.group_vectors(group) * splitting_directions(&pm);
    fd_branches(&pair.a, &pm.members, &v, predicted, pm.lambda_bar, steps, |t| {
        let perturbed = pert.apply(spec, t)?;
        let pair = assemble_problem(mesh, &perturbed).map_err(|e| match e {
            Error::Coercivity(msg) => Error::Coercivity(format!("at step t = {t:e}: {msg}")),
            other => other,
        })?;
        solve_eigen(&pair, k)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_annulus, Tag};
    use crate::shapederiv::leading_groups;
    use nalgebra::DMatrix;

    fn setup(v: Variant) -> (Mesh, ProblemSpec, EigenSolution, Vec<EigenGroup>) {
        let m = build_annulus(0.5, 1.0, 4, 32).unwrap();
        let spec = ProblemSpec::new(v);
        let sol = solve_eigen(&assemble_problem(&m, &spec).unwrap(), 5).unwrap();
        let g = leading_groups(&sol, 5, 1e-8);
        (m, spec, sol, g)
    }

    #[test]
    fn zero_perturbations_give_zero() {
        let (m, spec, sol, g) = setup(Variant::P1);
        let zero = CoefficientPerturbation::BoundaryPotential(ScalarField::constant(0.0));
        assert_eq!(pot_down_matrix(&m, &spec, &sol, &g[1], &zero).unwrap().matrix.amax(), 0.0);
        let zero_b = CoefficientPerturbation::MatrixField(MatrixField::Constant { value: [[0.0; 2]; 2] });
        assert_eq!(aniso_matrix(&m, &spec, &sol, &g[1], &zero_b).unwrap().matrix.amax(), 0.0);
        assert!(matches!(pot_up_matrix(&m, &spec, &sol, &g[1], &zero), Err(Error::Argument(_))));
    }

    #[test]
    fn indicator_of_s_is_scalar() {
        let (m, spec, sol, g) = setup(Variant::P1);
        let ind = CoefficientPerturbation::BoundaryPotential(ScalarField::Indicator { tag: Tag::S });
        for grp in &g {
            let pm = pot_down_matrix(&m, &spec, &sol, grp, &ind).unwrap();
            let mu = grp.mu(&sol);
            let target = -mu * mu * DMatrix::<f64>::identity(grp.multiplicity, grp.multiplicity);
            assert!((pm.matrix - target).amax() < 1e-12);
        }
    }

    #[test]
    fn isotropic_conductivity_identity() {
        // B = εI: M = -μ̄ε(I - Xᵀ(mass)X)
        let (m, spec, sol, g) = setup(Variant::P2);
        let pair = assemble_problem(&m, &spec).unwrap();
        let eps = 0.25;
        let b = CoefficientPerturbation::MatrixField(MatrixField::Constant { value: [[eps, 0.0], [0.0, eps]] });
        let pm = aniso_matrix(&m, &spec, &sol, &g[1], &b).unwrap();
        let x = sol.group_vectors(&g[1]);
        let expect = -pm.mu_bar * eps * (DMatrix::identity(2, 2) - pair.mass.sandwich(&x, &x));
        assert!((pm.matrix - expect).amax() < 1e-10);
    }

    #[test]
    fn apply_promotes_variants() {
        let spec = ProblemSpec::new(Variant::P2);
        let b = CoefficientPerturbation::VolumePotential(ScalarField::constant(0.5));
        let s = b.apply(&spec, 2.0).unwrap();
        assert_eq!(s.variant, Variant::P3b);
        assert_eq!(s.potential, ScalarField::constant(2.0));
        assert!(b.apply(&ProblemSpec::new(Variant::P1), 1.0).is_err());
    }

    #[test]
    fn coercivity_loss_names_the_step() {
        let (m, spec, _, g) = setup(Variant::P1);
        let b = CoefficientPerturbation::BoundaryPotential(ScalarField::constant(-1.0));
        match coeff_fd_check(&m, &spec, &b, &g[1], &[2.0]) {
            Err(Error::Coercivity(msg)) => assert!(msg.contains("t = 2e0")),
            other => panic!("{other:?}"),
        }
    }
}
