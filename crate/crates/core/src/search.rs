//! Splitting search and the iterated simplification loops.
//!
//! A step picks, among a finite candidate family, the perturbation whose
//! first-order matrix `M` is furthest from a multiple of the identity per unit
//! norm, scales it to the step budget, applies it and re-solves.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coeffderiv::{coefficient_matrix, CoefficientPerturbation, PerturbationKind};
use crate::coefficient::{MatrixField, ScalarField};
use crate::forms::{assemble_problem, ProblemSpec};
use crate::geometry::{
    c2_norm_estimate, deform, DisplacementField, FieldSpec, Mesh, Point, Profile, Support, Tag,
};
use crate::shapederiv::{nosplit_deviation, perturbation_matrix, predict_splitting, PerturbationMatrix};
use crate::spectrum::{cluster_eigen, solve_eigen, EigenGroup, EigenSolution};
use crate::{Error, Result};

/// Either a domain deformation or an additive coefficient change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Perturbation {
    Shape(DisplacementField),
    Coefficient(CoefficientPerturbation),
}

impl Perturbation {
    /// C² estimate for shapes, sampled sup-norm for coefficients.
    pub fn norm(&self, mesh: &Mesh) -> f64 {
        match self {
            Perturbation::Shape(psi) => c2_norm_estimate(psi, &mesh.sample_points()),
            Perturbation::Coefficient(b) => b.sup_estimate(mesh),
        }
    }

    pub fn matrix(
        &self,
        mesh: &Mesh,
        spec: &ProblemSpec,
        sol: &EigenSolution,
        group: &EigenGroup,
    ) -> Result<PerturbationMatrix> {
        match self {
            Perturbation::Shape(psi) => perturbation_matrix(mesh, spec, sol, group, psi),
            Perturbation::Coefficient(b) => coefficient_matrix(mesh, spec, sol, group, b),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        match self {
            Perturbation::Shape(psi) => Perturbation::Shape(psi.scaled(c)),
            Perturbation::Coefficient(b) => Perturbation::Coefficient(b.scaled(c)),
        }
    }

    /// `Σ c_i p_i`; all terms must be of the same type.
    pub fn combine(terms: &[(f64, &Perturbation)]) -> Result<Self> {
        let mixed = || Error::Argument("cannot combine shape and coefficient perturbations".into());
        match terms.first() {
            None => Err(Error::Argument("empty combination".into())),
            Some((_, Perturbation::Shape(_))) => {
                let fields = terms
                    .iter()
                    .map(|(c, p)| match p {
                        Perturbation::Shape(psi) => Ok((*c, psi)),
                        Perturbation::Coefficient(_) => Err(mixed()),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Perturbation::Shape(DisplacementField::combine(&fields)))
            }
            Some((_, Perturbation::Coefficient(_))) => {
                let coeffs = terms
                    .iter()
                    .map(|(c, p)| match p {
                        Perturbation::Coefficient(b) => Ok((*c, b)),
                        Perturbation::Shape(_) => Err(mixed()),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Perturbation::Coefficient(CoefficientPerturbation::combine(&coeffs)?))
            }
        }
    }

    /// The perturbed problem at step `t`.
    pub fn apply(&self, mesh: &Mesh, spec: &ProblemSpec, t: f64) -> Result<(Mesh, ProblemSpec)> {
        match self {
            Perturbation::Shape(psi) => Ok((deform(mesh, psi, t)?, spec.clone())),
            Perturbation::Coefficient(b) => Ok((mesh.clone(), b.apply(spec, t)?)),
        }
    }
}

fn radial_harmonic(center: Point, k: usize, sine: bool, profile: Profile, r0: f64, r1: f64) -> FieldSpec {
    let k = k as f64;
    FieldSpec::RadialBump {
        center,
        k,
        phase: if sine { PI / (2.0 * k) } else { 0.0 },
        amplitude: 1.0,
        profile,
        r_start: r0,
        r_end: r1,
    }
}

fn point_segment_distance(x: Point, p: Point, q: Point) -> f64 {
    let d = [q[0] - p[0], q[1] - p[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let s = if len2 == 0.0 {
        0.0
    } else {
        (((x[0] - p[0]) * d[0] + (x[1] - p[1]) * d[1]) / len2).clamp(0.0, 1.0)
    };
    (x[0] - p[0] - s * d[0]).hypot(x[1] - p[1] - s * d[1])
}

fn distance_to_tags(mesh: &Mesh, x: Point, tags: &[Tag]) -> f64 {
    mesh.boundary()
        .iter()
        .filter(|e| tags.contains(&e.tag))
        .map(|e| point_segment_distance(x, mesh.vertices()[e.a], mesh.vertices()[e.b]))
        .fold(f64::INFINITY, f64::min)
}

/// Candidate displacement fields supported as requested.
///
/// On annuli these are angular harmonics `cos kθ`, `sin kθ` (k = 1, 2, …)
/// times a radial ramp that vanishes to second order on the excluded circle,
/// in two flavours: a parabolic ramp that moves the boundary with nonzero
/// normal derivative, and a smoothstep that is flat at the boundary.
/// Elsewhere they are compact bumps centred on the allowed boundary part
/// (normal and tangential directions) or in the interior.
pub fn make_candidates(mesh: &Mesh, support: Support, count: usize) -> Vec<DisplacementField> {
    if count == 0 {
        return Vec::new();
    }
    let meta = mesh.meta();
    let mut specs: Vec<FieldSpec> = Vec::new();
    if meta.family == "annulus" {
        let (r_in, r_out) = (meta.params["r_inner"], meta.params["r_outer"]);
        let outer_s = meta.params.get("outer_is_s").copied().unwrap_or(1.0) != 0.0;
        let parabolic = Profile::Parabolic { knee: 0.25 };
        let mid = 0.5 * (r_in + r_out);
        let inset = 0.1 * (r_out - r_in);
        // straight edges of the outer polygon dip to r_out·cos(π/n) between vertices
        let n_angular = meta.params.get("n_angular").copied().unwrap_or(f64::INFINITY);
        let r_chord = r_out * (PI / n_angular).cos() * (1.0 - 1e-9);
        // ramps start on the excluded circle and grow towards the allowed one
        let windows: Vec<(Profile, f64, f64)> = match (support, outer_s) {
            (Support::BoundaryS, true) | (Support::BoundaryW, false) => {
                vec![(parabolic, r_in, r_out), (Profile::Smoothstep, r_in, r_out)]
            }
            (Support::BoundaryS, false) | (Support::BoundaryW, true) => {
                vec![(parabolic, r_chord, r_in), (Profile::Smoothstep, r_chord, r_in)]
            }
            (Support::Interior, _) => vec![
                (Profile::Hump, r_in + inset, r_out - inset),
                (Profile::Hump, r_in + inset, mid),
                (Profile::Hump, mid, r_out - inset),
            ],
            (Support::Global, _) => vec![(Profile::Unit, r_in, r_out), (parabolic, r_in, r_out)],
        };
        'outer: for k in 1.. {
            for &(profile, r0, r1) in &windows {
                for sine in [false, true] {
                    specs.push(radial_harmonic([0.0, 0.0], k, sine, profile, r0, r1));
                    if specs.len() == count {
                        break 'outer;
                    }
                }
            }
        }
    } else {
        specs = bump_candidates(mesh, support, count);
    }
    specs
        .into_iter()
        .filter_map(|s| DisplacementField::new(s, support).ok())
        .collect()
}

fn bump_candidates(mesh: &Mesh, support: Support, count: usize) -> Vec<FieldSpec> {
    let (lo, hi) = mesh.bounding_box();
    let diam = (hi[0] - lo[0]).hypot(hi[1] - lo[1]);
    let excluded = support.excluded();
    let mut out = Vec::new();
    if support == Support::Interior {
        let per = count.max(1);
        let stride = (mesh.triangles().len() / per).max(1);
        for t in (0..mesh.triangles().len()).step_by(stride) {
            let tri = mesh.triangles()[t];
            let v = |i: usize| mesh.vertices()[tri[i]];
            let c = [(v(0)[0] + v(1)[0] + v(2)[0]) / 3.0, (v(0)[1] + v(1)[1] + v(2)[1]) / 3.0];
            let radius = 0.9 * distance_to_tags(mesh, c, &[Tag::S, Tag::W]).min(0.25 * diam);
            if radius < 1e-3 * diam {
                continue;
            }
            let dir = if out.len() % 2 == 0 { [1.0, 0.0] } else { [0.0, 1.0] };
            out.push(FieldSpec::InteriorBump { center: c, radius, direction: dir });
            if out.len() == count {
                break;
            }
        }
        return out;
    }
    let allowed: Vec<usize> = (0..mesh.boundary().len())
        .filter(|&i| !excluded.contains(&mesh.boundary()[i].tag))
        .collect();
    if allowed.is_empty() {
        return out;
    }
    let centres = count.div_ceil(2).max(1);
    let stride = (allowed.len() / centres).max(1);
    for &i in allowed.iter().step_by(stride) {
        let e = &mesh.boundary()[i];
        let (p, q) = (mesh.vertices()[e.a], mesh.vertices()[e.b]);
        let c = [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])];
        let radius = distance_to_tags(mesh, c, excluded).min(0.25 * diam);
        if radius < 1e-3 * diam {
            continue;
        }
        let nu = mesh.outward_normal(e);
        for dir in [nu, [-nu[1], nu[0]]] {
            out.push(FieldSpec::InteriorBump { center: c, radius, direction: dir });
            if out.len() == count {
                return out;
            }
        }
    }
    out
}

/// Candidate coefficient perturbations of one kind: angular harmonics about
/// the mesh centroid (cos and sin), after a constant.
pub fn coefficient_candidates(mesh: &Mesh, kind: PerturbationKind, count: usize) -> Vec<CoefficientPerturbation> {
    let center = if mesh.meta().family == "annulus" { [0.0, 0.0] } else { mesh.centroid() };
    let harmonic = |k: usize, sine: bool| ScalarField::Angular {
        k: k as f64,
        amplitude: 1.0,
        phase: if sine { PI / (2.0 * k as f64) } else { 0.0 },
        center,
    };
    let mut out = Vec::new();
    let push = |p: CoefficientPerturbation, out: &mut Vec<CoefficientPerturbation>| {
        if out.len() < count {
            out.push(p);
        }
    };
    let wrap = |s: ScalarField| match kind {
        PerturbationKind::BoundaryPotential => CoefficientPerturbation::BoundaryPotential(s),
        PerturbationKind::VolumePotential => CoefficientPerturbation::VolumePotential(s),
        PerturbationKind::MatrixField => CoefficientPerturbation::MatrixField(MatrixField::Isotropic { scalar: s }),
    };
    push(wrap(ScalarField::constant(1.0)), &mut out);
    let mut k = 1;
    while out.len() < count {
        for sine in [false, true] {
            push(wrap(harmonic(k, sine)), &mut out);
            if kind == PerturbationKind::MatrixField {
                let zero = ScalarField::constant(0.0);
                let h = harmonic(k, sine);
                push(
                    CoefficientPerturbation::MatrixField(MatrixField::Entries {
                        xx: h.clone(),
                        xy: zero.clone(),
                        yy: h.scaled(-1.0),
                    }),
                    &mut out,
                );
                push(
                    CoefficientPerturbation::MatrixField(MatrixField::Entries {
                        xx: zero.clone(),
                        xy: h,
                        yy: zero,
                    }),
                    &mut out,
                );
            }
        }
        k += 1;
    }
    out
}

/// Search settings for [`best_splitting_perturbation`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    /// Number of random two-term combinations tried after the single candidates.
    pub random_pairs: usize,
    pub seed: u64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions { random_pairs: 48, seed: 0 }
    }
}

/// A perturbation scaled to the step budget with its first-order matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitChoice {
    pub perturbation: Perturbation,
    /// Norm of `perturbation` (equal to the budget).
    pub norm: f64,
    /// `M` for `perturbation`, rows of `matrix` in group order.
    pub matrix: Vec<Vec<f64>>,
    pub lambda_bar: f64,
    /// Deviation of `M` from a multiple of the identity per unit norm.
    pub score: f64,
    /// Candidate indices and unit-norm weights forming the choice.
    pub terms: Vec<(usize, f64)>,
}

impl SplitChoice {
    pub fn matrix(&self) -> DMatrix<f64> {
        let m = self.matrix.len();
        DMatrix::from_fn(m, m, |i, j| self.matrix[i][j])
    }

    /// Predicted eigenvalue slopes along the chosen direction, ascending.
    pub fn predicted_slopes(&self, group: &EigenGroup) -> Vec<f64> {
        predict_splitting(&PerturbationMatrix {
            members: group.members.clone(),
            lambda_bar: self.lambda_bar,
            mu_bar: 1.0 / self.lambda_bar,
            matrix: self.matrix(),
            deviation: 0.0,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum SplitOutcome {
    Found(SplitChoice),
    /// Every candidate gives `M` proportional to the identity within tolerance.
    NoSplitFound { best_score: f64, scale: f64 },
}

/// A unit-norm combination of candidates and its deviation.
struct Scored {
    score: f64,
    terms: Vec<(usize, f64)>,
    matrix: DMatrix<f64>,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Maximizes `deviation(M(c)) / ‖c‖` over single candidates and random
/// two-term combinations, then scales the winner to norm `budget`.
pub fn best_splitting_perturbation(
    mesh: &Mesh,
    spec: &ProblemSpec,
    sol: &EigenSolution,
    group: &EigenGroup,
    candidates: &[Perturbation],
    budget: f64,
    opts: SearchOptions,
) -> Result<SplitOutcome> {
    if candidates.is_empty() {
        return Err(Error::Argument("empty candidate list".into()));
    }
    if !(budget > 0.0 && budget.is_finite()) {
        return Err(Error::Argument(format!("budget must be positive, got {budget}")));
    }
    if group.multiplicity < 2 {
        return Err(Error::Argument(format!(
            "group {:?} is simple; nothing to split",
            group.members
        )));
    }
    // unit-norm matrices; zero fields are dropped
    let mut unit: Vec<(usize, f64, DMatrix<f64>)> = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        let n = c.norm(mesh);
        if n > 0.0 && n.is_finite() {
            let pm = c.matrix(mesh, spec, sol, group)?;
            unit.push((i, n, pm.matrix / n));
        }
    }
    let lambda_bar = group.lambda;
    let scale = unit.iter().map(|u| u.2.norm()).fold(0.0, f64::max);
    let mut best: Option<Scored> = None;
    let mut consider = |c: Scored| {
        if best.as_ref().is_none_or(|b| c.score > b.score) {
            best = Some(c);
        }
    };
    for (i, _, m) in &unit {
        consider(Scored { score: nosplit_deviation(m), terms: vec![(*i, 1.0)], matrix: m.clone() });
    }
    if unit.len() >= 2 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for _ in 0..opts.random_pairs {
            let a = rng.random_range(0..unit.len());
            let mut b = rng.random_range(0..unit.len() - 1);
            if b >= a {
                b += 1;
            }
            let angle = rng.random_range(0.0..2.0 * PI);
            let (ca, cb) = (angle.cos(), angle.sin());
            let (ia, na, ma) = &unit[a];
            let (ib, nb, mb) = &unit[b];
            let combo = Perturbation::combine(&[(ca / na, &candidates[*ia]), (cb / nb, &candidates[*ib])])?;
            let norm = combo.norm(mesh);
            if norm <= 0.0 || !norm.is_finite() {
                continue;
            }
            let m = (ma * ca + mb * cb) / norm;
            consider(Scored {
                score: nosplit_deviation(&m),
                terms: vec![(*ia, ca / na / norm), (*ib, cb / nb / norm)],
                matrix: m,
            });
        }
    }
    let Some(Scored { score, terms, matrix: m }) = best else {
        return Ok(SplitOutcome::NoSplitFound { best_score: 0.0, scale: 0.0 });
    };
    if score <= 1e-6 * scale + 1e-12 {
        return Ok(SplitOutcome::NoSplitFound { best_score: score, scale });
    }
    let parts: Vec<(f64, &Perturbation)> = terms.iter().map(|&(i, w)| (w * budget, &candidates[i])).collect();
    let perturbation = Perturbation::combine(&parts)?;
    Ok(SplitOutcome::Found(SplitChoice {
        norm: perturbation.norm(mesh),
        perturbation,
        matrix: to_rows(&(m * budget)),
        lambda_bar,
        score,
        terms,
    }))
}

/// One tried step size inside [`split_step`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepAttempt {
    pub t: f64,
    pub predicted_gap: f64,
    /// Largest relative gap observed inside the group's window, if solved.
    pub observed_gap: Option<f64>,
    pub multiplicity_after: Option<usize>,
    pub error: Option<String>,
}

/// Result of applying a chosen perturbation.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub mesh: Mesh,
    pub spec: ProblemSpec,
    pub solution: EigenSolution,
    /// Accepted step size (`None` when every attempt failed).
    pub t: Option<f64>,
    pub attempts: Vec<StepAttempt>,
}

fn window_profile(lambda: &[f64], window: &[usize], gap_tol: f64) -> (usize, f64) {
    let vals: Vec<f64> = window.iter().map(|&i| lambda[i]).collect();
    let mult = cluster_eigen(&vals, gap_tol)
        .iter()
        .map(|g| g.multiplicity)
        .max()
        .unwrap_or(0);
    let gap = vals
        .windows(2)
        .map(|w| crate::spectrum::relative_gap(w[0], w[1]))
        .fold(0.0, f64::max);
    (mult, gap)
}

/// Applies `choice` at a step `t ∈ (0, 1]` (applied norm `t·choice.norm`).
///
/// The first trial aims at a predicted relative gap of `10·gap_tol`; it is
/// followed by `min(2t*, 1)` and `1` until the group's maximal multiplicity
/// at `gap_tol` drops.
pub fn split_step(
    mesh: &Mesh,
    spec: &ProblemSpec,
    sol: &EigenSolution,
    group: &EigenGroup,
    choice: &SplitChoice,
    gap_tol: f64,
) -> Result<StepResult> {
    let slopes = choice.predicted_slopes(group);
    let spread = slopes.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    let lambda_bar = group.lambda;
    let target = if spread > 0.0 {
        (10.0 * gap_tol * lambda_bar / spread).min(1.0)
    } else {
        1.0
    };
    let mut trials = vec![target, (2.0 * target).min(1.0), 1.0];
    trials.dedup();
    let k = sol.len();
    let mut attempts = Vec::new();
    for t in trials {
        let predicted_gap = t * spread / lambda_bar;
        let solved = choice
            .perturbation
            .apply(mesh, spec, t)
            .and_then(|(m, s)| {
                let pair = assemble_problem(&m, &s)?;
                let sol_t = solve_eigen(&pair, k)?;
                Ok((m, s, sol_t))
            });
        match solved {
            Ok((m, s, sol_t)) => {
                let (mult, gap) = window_profile(&sol_t.lambda, &group.members, gap_tol);
                attempts.push(StepAttempt {
                    t,
                    predicted_gap,
                    observed_gap: Some(gap),
                    multiplicity_after: Some(mult),
                    error: None,
                });
                if mult < group.multiplicity {
                    return Ok(StepResult { mesh: m, spec: s, solution: sol_t, t: Some(t), attempts });
                }
            }
            Err(e) => attempts.push(StepAttempt {
                t,
                predicted_gap,
                observed_gap: None,
                multiplicity_after: None,
                error: Some(e.to_string()),
            }),
        }
    }
    Ok(StepResult {
        mesh: mesh.clone(),
        spec: spec.clone(),
        solution: sol.clone(),
        t: None,
        attempts,
    })
}

/// Why a simplification loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// All tracked relative gaps exceed `gap_tol`.
    Converged,
    /// No candidate splits the target group.
    Inconclusive,
    /// A chosen perturbation did not open the gap at any trial step.
    StepFailed,
    MaxIterations,
}

/// Settings shared by both simplification loops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimplifyOptions {
    /// Number of leading eigenvalues tracked.
    pub count: usize,
    /// Total budget `ε`; step `ℓ` may use at most `ε/2^ℓ`.
    pub epsilon: f64,
    pub gap_tol: f64,
    pub max_iter: usize,
    pub candidates: usize,
    pub search: SearchOptions,
}

impl SimplifyOptions {
    pub fn new(count: usize, epsilon: f64, gap_tol: f64) -> Self {
        SimplifyOptions {
            count,
            epsilon,
            gap_tol,
            max_iter: 10,
            candidates: 32,
            search: SearchOptions::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Argument("count must be positive".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Argument(format!("budget must be positive, got {}", self.epsilon)));
        }
        if !(self.gap_tol > 0.0) {
            return Err(Error::Argument("gap_tol must be positive".into()));
        }
        Ok(())
    }
}

/// One accepted or attempted step of a simplification loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimplifyStep {
    /// Step number `ℓ ≥ 1`.
    pub level: usize,
    pub budget: f64,
    pub target: Vec<usize>,
    pub choice: Option<SplitChoice>,
    /// Accepted step size and the norm actually applied (`t · budget`).
    pub t: Option<f64>,
    pub applied_norm: f64,
    pub attempts: Vec<StepAttempt>,
    pub spectrum_before: Vec<f64>,
    pub spectrum_after: Vec<f64>,
    pub multiplicities_before: Vec<usize>,
    pub multiplicities_after: Vec<usize>,
}

/// Record of an iterated simplification run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimplifyTrace {
    pub mode: String,
    pub options: SimplifyOptions,
    pub initial_spectrum: Vec<f64>,
    pub steps: Vec<SimplifyStep>,
    pub termination: Termination,
    pub final_spectrum: Vec<f64>,
    pub final_multiplicities: Vec<usize>,
    /// Problem after all accepted steps (coefficients accumulate here).
    pub final_spec: ProblemSpec,
    /// Running mesh after the composed deformations; not serialized.
    #[serde(skip)]
    pub final_mesh: Option<Mesh>,
}

impl SimplifyTrace {
    pub fn total_norm(&self) -> f64 {
        self.steps.iter().map(|s| s.applied_norm).sum()
    }

    /// `ε_ℓ ≤ ε/2^ℓ` for every step and the applied total stays within `ε`.
    pub fn budget_ledger_holds(&self) -> bool {
        let eps = self.options.epsilon;
        let slack = 1e-12 * eps;
        self.steps.iter().all(|s| {
            let cap = eps / 2f64.powi(s.level as i32);
            s.budget <= cap + slack && s.applied_norm <= s.budget + slack
        }) && self.total_norm() <= eps + slack
    }

    /// Smallest relative gap between consecutive tracked eigenvalues.
    pub fn final_min_gap(&self) -> f64 {
        self.final_spectrum
            .windows(2)
            .map(|w| crate::spectrum::relative_gap(w[0], w[1]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn profile(lambda: &[f64], gap_tol: f64) -> (Vec<EigenGroup>, Vec<usize>) {
    let groups = cluster_eigen(lambda, gap_tol);
    let mults = groups.iter().map(|g| g.multiplicity).collect();
    (groups, mults)
}

/// Shared loop: the candidate family is rebuilt on the current problem each step.
fn simplify_loop(
    mode: &str,
    mesh: &Mesh,
    spec: &ProblemSpec,
    opts: SimplifyOptions,
    candidates: &dyn Fn(&Mesh) -> Vec<Perturbation>,
) -> Result<SimplifyTrace> {
    opts.validate()?;
    let mut mesh = mesh.clone();
    let mut spec = spec.clone();
    let k = opts.count;
    let mut sol = solve_eigen(&assemble_problem(&mesh, &spec)?, k)?;
    let initial_spectrum = sol.lambda.clone();
    let mut steps = Vec::new();
    let termination = loop {
        let (groups, mults) = profile(&sol.lambda, opts.gap_tol);
        let Some(target) = groups.iter().find(|g| g.is_multiple()).cloned() else {
            break Termination::Converged;
        };
        let level = steps.len() + 1;
        if level > opts.max_iter {
            break Termination::MaxIterations;
        }
        let budget = opts.epsilon / 2f64.powi(level as i32);
        let family = candidates(&mesh);
        let search = SearchOptions {
            seed: opts.search.seed.wrapping_add(level as u64),
            ..opts.search
        };
        let mut step = SimplifyStep {
            level,
            budget,
            target: target.members.clone(),
            choice: None,
            t: None,
            applied_norm: 0.0,
            attempts: Vec::new(),
            spectrum_before: sol.lambda.clone(),
            spectrum_after: sol.lambda.clone(),
            multiplicities_before: mults.clone(),
            multiplicities_after: mults,
        };
        let outcome = if family.is_empty() {
            SplitOutcome::NoSplitFound { best_score: 0.0, scale: 0.0 }
        } else {
            best_splitting_perturbation(&mesh, &spec, &sol, &target, &family, budget, search)?
        };
        let choice = match outcome {
            SplitOutcome::Found(c) => c,
            SplitOutcome::NoSplitFound { .. } => {
                steps.push(step);
                break Termination::Inconclusive;
            }
        };
        let result = split_step(&mesh, &spec, &sol, &target, &choice, opts.gap_tol)?;
        step.attempts = result.attempts;
        step.choice = Some(choice);
        let Some(t) = result.t else {
            steps.push(step);
            break Termination::StepFailed;
        };
        step.t = Some(t);
        step.applied_norm = t * budget;
        mesh = result.mesh;
        spec = result.spec;
        sol = result.solution;
        step.spectrum_after = sol.lambda.clone();
        step.multiplicities_after = profile(&sol.lambda, opts.gap_tol).1;
        steps.push(step);
    };
    let final_multiplicities = profile(&sol.lambda, opts.gap_tol).1;
    Ok(SimplifyTrace {
        mode: mode.to_string(),
        options: opts,
        initial_spectrum,
        steps,
        termination,
        final_spectrum: sol.lambda,
        final_multiplicities,
        final_spec: spec,
        final_mesh: Some(mesh),
    })
}

/// Iterated domain perturbation: each step deforms the running mesh by a
/// field supported as `support`, with budget `ε/2^ℓ` in the C² estimate.
pub fn greedy_simplify(mesh: &Mesh, spec: &ProblemSpec, support: Support, opts: SimplifyOptions) -> Result<SimplifyTrace> {
    simplify_loop("shape", mesh, spec, opts, &|m| {
        make_candidates(m, support, opts.candidates)
            .into_iter()
            .map(Perturbation::Shape)
            .collect()
    })
}

/// Iterated coefficient perturbation `a ← a + t b` (or `A ← A + t B`) with
/// budget `ε/2^ℓ` in the sampled sup-norm.
pub fn coeff_simplify(
    mesh: &Mesh,
    spec: &ProblemSpec,
    kind: PerturbationKind,
    opts: SimplifyOptions,
) -> Result<SimplifyTrace> {
    let mode = match kind {
        PerturbationKind::BoundaryPotential => "boundary_potential",
        PerturbationKind::VolumePotential => "volume_potential",
        PerturbationKind::MatrixField => "conductivity",
    };
    simplify_loop(mode, mesh, spec, opts, &|m| {
        coefficient_candidates(m, kind, opts.candidates)
            .into_iter()
            .map(Perturbation::Coefficient)
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::Variant;
    use crate::geometry::{build_annulus, build_rectangle, field_library, params, SideTags};

    fn rectangle(w: f64, h: f64, nx: usize, ny: usize) -> Mesh {
        let sides = SideTags { bottom: Tag::S, top: Tag::S, left: Tag::W, right: Tag::W };
        build_rectangle(w, h, nx, ny, |p, q| sides.tag(w, h, p, q)).unwrap()
    }
    use crate::shapederiv::leading_groups;

    fn annulus_setup() -> (Mesh, ProblemSpec, EigenSolution, Vec<EigenGroup>) {
        let mesh = build_annulus(0.5, 1.0, 6, 48).unwrap();
        let spec = ProblemSpec::new(Variant::P1);
        let sol = solve_eigen(&assemble_problem(&mesh, &spec).unwrap(), 8).unwrap();
        let groups = leading_groups(&sol, 8, 1e-8);
        (mesh, spec, sol, groups)
    }

    #[test]
    fn candidates_respect_support() {
        let annulus = build_annulus(0.5, 1.0, 6, 48).unwrap();
        let rect = rectangle(2.0, 1.0, 8, 4);
        for mesh in [&annulus, &rect] {
            for support in [Support::BoundaryS, Support::BoundaryW, Support::Interior] {
                let c = make_candidates(mesh, support, 12);
                assert!(!c.is_empty(), "{support:?} on {}", mesh.meta().family);
                assert!(c.len() <= 12);
                for f in &c {
                    assert_eq!(f.support, support);
                    assert!(f.support_violation(mesh) < 1e-12, "{:?}", f.spec);
                }
            }
        }
        assert!(make_candidates(&annulus, Support::BoundaryS, 0).is_empty());
    }

    #[test]
    fn constant_candidates_find_no_split() {
        let (mesh, spec, sol, groups) = annulus_setup();
        let pair = &groups[1];
        assert_eq!(pair.multiplicity, 2);
        let c = field_library("constant", &params(&[("vx", 1.0)])).unwrap();
        let out =
            best_splitting_perturbation(&mesh, &spec, &sol, pair, &[Perturbation::Shape(c)], 0.1, SearchOptions::default())
                .unwrap();
        assert!(matches!(out, SplitOutcome::NoSplitFound { .. }));
    }

    #[test]
    fn harmonic_candidate_is_selected_for_first_pair() {
        let (mesh, spec, sol, groups) = annulus_setup();
        let pair = &groups[1];
        let cands: Vec<Perturbation> = make_candidates(&mesh, Support::BoundaryS, 8)
            .into_iter()
            .map(Perturbation::Shape)
            .collect();
        let out = best_splitting_perturbation(&mesh, &spec, &sol, pair, &cands, 0.05, SearchOptions::default()).unwrap();
        let SplitOutcome::Found(choice) = out else { panic!("no split found") };
        assert!(choice.score > 0.0);
        assert!((choice.norm - 0.05).abs() < 1e-9 * 0.05 + 1e-12, "{}", choice.norm);
        // cos 2θ / sin 2θ candidates sit at indices 2, 3, 6, 7; the dominant term must be one of them
        let dominant = choice
            .terms
            .iter()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap()
            .0;
        let Perturbation::Shape(f) = &cands[dominant] else { unreachable!() };
        let FieldSpec::RadialBump { k, .. } = f.spec else { panic!() };
        assert_eq!(k, 2.0);
    }

    #[test]
    fn argument_errors() {
        let (mesh, spec, sol, groups) = annulus_setup();
        let c = vec![Perturbation::Shape(make_candidates(&mesh, Support::BoundaryS, 1).remove(0))];
        let opts = SearchOptions::default();
        assert!(matches!(
            best_splitting_perturbation(&mesh, &spec, &sol, &groups[1], &c, 0.0, opts),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            best_splitting_perturbation(&mesh, &spec, &sol, &groups[1], &[], 0.1, opts),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            best_splitting_perturbation(&mesh, &spec, &sol, &groups[0], &c, 0.1, opts),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn simple_spectrum_gives_empty_trace() {
        let mesh = rectangle(1.3, 1.0, 8, 6);
        let spec = ProblemSpec::new(Variant::P1);
        let trace = greedy_simplify(&mesh, &spec, Support::BoundaryS, SimplifyOptions::new(3, 0.05, 1e-3)).unwrap();
        assert_eq!(trace.final_multiplicities, vec![1, 1, 1], "{:?}", trace.final_spectrum);
        assert_eq!(trace.termination, Termination::Converged);
        assert!(trace.steps.is_empty());
        assert!(trace.budget_ledger_holds());
    }

    #[test]
    fn constant_coefficient_candidates_are_inconclusive() {
        let (mesh, _, _, _) = annulus_setup();
        let spec = ProblemSpec::new(Variant::P3b);
        let mut opts = SimplifyOptions::new(4, 0.05, 1e-3);
        opts.candidates = 1;
        let trace = coeff_simplify(&mesh, &spec, PerturbationKind::VolumePotential, opts).unwrap();
        assert_eq!(trace.termination, Termination::Inconclusive);
        assert_eq!(trace.steps.len(), 1);
        assert!(trace.steps[0].choice.is_none());
        assert_eq!(trace.total_norm(), 0.0);
    }

    #[test]
    fn coefficient_candidate_kinds() {
        let mesh = build_annulus(0.5, 1.0, 4, 32).unwrap();
        for kind in [
            PerturbationKind::BoundaryPotential,
            PerturbationKind::VolumePotential,
            PerturbationKind::MatrixField,
        ] {
            let c = coefficient_candidates(&mesh, kind, 7);
            assert_eq!(c.len(), 7);
            assert!(c.iter().all(|p| p.kind() == kind));
        }
    }

    #[test]
    fn trace_serializes() {
        let (mesh, spec, _, _) = annulus_setup();
        let mut opts = SimplifyOptions::new(3, 0.05, 1e-3);
        opts.candidates = 8;
        let trace = greedy_simplify(&mesh, &spec, Support::BoundaryS, opts).unwrap();
        let json = trace.to_json().unwrap();
        let back: SimplifyTrace = serde_json::from_str(&json).unwrap();
        assert_eq!(back.steps.len(), trace.steps.len());
        assert_eq!(back.termination, trace.termination);
        assert_eq!(back.final_spectrum, trace.final_spectrum);
    }
}
