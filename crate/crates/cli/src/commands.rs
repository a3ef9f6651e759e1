//! Experiment pipelines. Each writes its tables into the output directory and
//! returns a status plus summary metrics for the manifest.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde_json::{json, Value};
use steklov_core::forms::{assemble_problem, AssembledPair, ProblemSpec, Variant};
use steklov_core::geometry::{c2_norm_estimate, params, Mesh, MeshDoc, Tag};
use steklov_core::search::{
    best_splitting_perturbation, coeff_simplify, greedy_simplify, make_candidates, split_step, Perturbation,
    SearchOptions, SimplifyOptions, SimplifyTrace, SplitOutcome, Termination,
};
use steklov_core::shapederiv::{fd_eigenvalue_check, leading_groups, pullback_fd_check, w_obstruction_scan, FdReport};
use steklov_core::spectrum::{cluster_eigen, minmax_check, solve_eigen, spectrum_csv, EigenGroup, EigenSolution};
use steklov_oracle::{annulus_modes_p1, annulus_modes_p2, oracle_table_csv, sorted_spectrum};

use crate::config::{DomainConfig, Experiment, FieldConfig, RunConfig};
use crate::output::OutputDir;
use crate::plot::trajectory_svg;
use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Success,
    Inconclusive(String),
    Failed(String),
}

pub struct Outcome {
    pub status: Status,
    pub summary: BTreeMap<String, Value>,
}

impl Outcome {
    fn new(status: Status) -> Self {
        Outcome { status, summary: BTreeMap::new() }
    }

    fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.summary.insert(key.to_string(), value.into());
        self
    }
}

fn e(v: f64) -> String {
    format!("{v:.12e}")
}

fn solve(mesh: &Mesh, spec: &ProblemSpec, k: usize) -> Result<(AssembledPair, EigenSolution), CliError> {
    let pair = assemble_problem(mesh, spec)?;
    let sol = solve_eigen(&pair, k)?;
    Ok((pair, sol))
}

pub fn run(command: &str, cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let experiment = cfg.experiment_for(command)?;
    let mesh = cfg.mesh()?;
    let spec = cfg.spec()?;
    out.write("config.toml", cfg.to_toml().as_bytes())?;
    match experiment {
        Experiment::Solve { minmax_trials } => cmd_solve(cfg, &mesh, &spec, minmax_trials, out),
        Experiment::DerivCheck { fields, steps, order_threshold, eigen_groups, normalize } => {
            let fields = if fields.is_empty() { default_fields(cfg, &mesh) } else { fields };
            cmd_deriv_check(cfg, &mesh, &spec, &fields, &steps, order_threshold, eigen_groups, normalize, out)
        }
        Experiment::Split { target, support, candidates, budget, gap_tol, random_pairs, fd_steps } => {
            let search = SearchOptions { random_pairs, seed: cfg.seed };
            let family: Vec<Perturbation> = make_candidates(&mesh, support.support(), candidates)
                .into_iter()
                .map(Perturbation::Shape)
                .collect();
            cmd_split(cfg, &mesh, &spec, target, &family, budget, gap_tol, search, &fd_steps, out)
        }
        Experiment::Simplify { count, epsilon, gap_tol, max_iter, support, candidates, random_pairs } => {
            let opts = SimplifyOptions {
                count,
                epsilon,
                gap_tol,
                max_iter,
                candidates,
                search: SearchOptions { random_pairs, seed: cfg.seed },
            };
            let trace = greedy_simplify(&mesh, &spec, support.support(), opts)?;
            write_trace(&trace, Some(&mesh), out)
        }
        Experiment::Coeff { coefficient, count, epsilon, gap_tol, max_iter, candidates, random_pairs } => {
            let opts = SimplifyOptions {
                count,
                epsilon,
                gap_tol,
                max_iter,
                candidates,
                search: SearchOptions { random_pairs, seed: cfg.seed },
            };
            let trace = coeff_simplify(&mesh, &spec, coefficient.kind(), opts)?;
            write_trace(&trace, None, out)
        }
        Experiment::OracleCompare { count, refine } => cmd_oracle(cfg, &spec, count, refine, out),
        Experiment::WScan { target } => cmd_w_scan(cfg, &mesh, &spec, target, out),
    }
}

fn cmd_solve(
    cfg: &RunConfig,
    mesh: &Mesh,
    spec: &ProblemSpec,
    minmax_trials: usize,
    out: &mut OutputDir,
) -> Result<Outcome, CliError> {
    let (pair, sol) = solve(mesh, spec, cfg.solver.k)?;
    let groups = cluster_eigen(&sol.lambda, cfg.solver.cluster_tol);
    out.write("spectrum.csv", spectrum_csv(&sol, &groups).as_bytes())?;
    let mut table = String::from("group,first,multiplicity,lambda,relative_spread\n");
    for (g, grp) in groups.iter().enumerate() {
        let vals: Vec<f64> = grp.members.iter().map(|&i| sol.lambda[i]).collect();
        let spread = (vals[vals.len() - 1] - vals[0]) / grp.lambda;
        let _ = writeln!(table, "{g},{},{},{},{:.3e}", grp.members[0], grp.multiplicity, e(grp.lambda), spread);
    }
    out.write("groups.csv", table.as_bytes())?;
    let mut outcome = Outcome::new(Status::Success)
        .with("eigenvalues", sol.len())
        .with("groups", groups.len())
        .with("multiple_groups", groups.iter().filter(|g| g.is_multiple()).count())
        .with("b_support", sol.b_support)
        .with("discarded_infinite", sol.discarded);
    if let Some(&l) = sol.lambda.first() {
        outcome = outcome.with("lambda_1", l);
    }
    if minmax_trials > 0 && !sol.is_empty() {
        let report = minmax_check(&pair, &sol, minmax_trials, sol.len().min(4), cfg.seed);
        out.write_json("minmax.json", &report)?;
        outcome = outcome.with("minmax_violations", report.violations.len());
        if !report.passed() {
            outcome.status = Status::Failed(format!("{} min-max violations", report.violations.len()));
        }
    }
    Ok(outcome)
}

/// Default fields: on annuli a cos 2θ radial bump, an S-supported axis field and
/// an interior bump; elsewhere an interior bump near the centroid. A constant
/// field is always included as an exact-zero reference.
fn default_fields(cfg: &RunConfig, mesh: &Mesh) -> Vec<FieldConfig> {
    let f = |family: &str, p: &[(&str, f64)]| FieldConfig { family: family.into(), params: params(p) };
    let mut out = vec![f("constant", &[("vx", 1.0), ("vy", 0.5)])];
    match cfg.domain {
        DomainConfig::Annulus { r_inner, r_outer, outer, .. } => {
            let (s_from, s_to) = if outer == Tag::S { (r_inner, r_outer) } else { (r_outer, r_inner) };
            let mid = 0.5 * (r_inner + r_outer);
            out.push(f("radial_bump", &[("k", 2.0), ("r_start", s_from), ("r_end", s_to), ("power", 3.0)]));
            let (start, end) = if s_from < s_to { (s_from, s_to) } else { (s_to, s_from) };
            if s_from < s_to {
                out.push(f(
                    "axis_field",
                    &[("start", start), ("end", end), ("power", 3.0), ("k", 2.0), ("support", 2.0)],
                ));
            }
            out.push(f("interior_bump", &[("cx", mid), ("radius", 0.4 * (r_outer - r_inner))]));
        }
        _ => {
            let (lo, hi) = mesh.bounding_box();
            let c = mesh.centroid();
            let radius = 0.3 * (hi[0] - lo[0]).min(hi[1] - lo[1]);
            out.push(f("interior_bump", &[("cx", c[0]), ("cy", c[1]), ("radius", radius), ("vx", 0.6), ("vy", 0.8)]));
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn cmd_deriv_check(
    cfg: &RunConfig,
    mesh: &Mesh,
    spec: &ProblemSpec,
    fields: &[FieldConfig],
    steps: &[f64],
    threshold: f64,
    eigen_groups: usize,
    normalize: bool,
    out: &mut OutputDir,
) -> Result<Outcome, CliError> {
    let with_order = steps.len() > 1;
    let mut lemma = String::from(if with_order {
        "field,form,step,residual,order,exact\n"
    } else {
        "field,form,step,residual,exact\n"
    });
    let mut eigen = String::from("field,group,step,branch,fd_slope,predicted,rel_err,flagged\n");
    let samples = mesh.sample_points();
    let (_, sol) = solve(mesh, spec, cfg.solver.k)?;
    let groups: Vec<EigenGroup> = leading_groups(&sol, cfg.solver.k, cfg.solver.cluster_tol)
        .into_iter()
        .take(eigen_groups)
        .collect();
    let mut worst_order = f64::INFINITY;
    let mut worst_residual: f64 = 0.0;
    let mut low = Vec::new();
    let mut eigen_note = None;
    for fc in fields {
        let mut psi = fc.build()?;
        let norm = c2_norm_estimate(&psi, &samples);
        if normalize && norm > 0.0 {
            psi = psi.scaled(1.0 / norm);
        }
        let label = fc.label();
        for r in pullback_fd_check(mesh, spec, &psi, steps)? {
            worst_residual = worst_residual.max(r.residual);
            let order = match r.order {
                Some(o) => {
                    worst_order = worst_order.min(o);
                    if o < threshold {
                        low.push(format!("{label}/{} at {}: {o:.3}", r.form, r.step));
                    }
                    format!("{o:.4}")
                }
                None => String::new(),
            };
            if with_order {
                let _ = writeln!(lemma, "\"{label}\",{},{:e},{:.6e},{order},{}", r.form, r.step, r.residual, r.exact);
            } else {
                let _ = writeln!(lemma, "\"{label}\",{},{:e},{:.6e},{}", r.form, r.step, r.residual, r.exact);
            }
        }
        for (gi, g) in groups.iter().enumerate() {
            match fd_eigenvalue_check(mesh, spec, &psi, g, steps) {
                Ok(report) => append_fd(&mut eigen, &format!("\"{label}\",{gi}"), &report),
                Err(steklov_core::Error::NotApplicable(msg)) => eigen_note = Some(msg),
                Err(err) => return Err(err.into()),
            }
        }
    }
    out.write("lemma.csv", lemma.as_bytes())?;
    out.write("eigen_fd.csv", eigen.as_bytes())?;
    let status = if low.is_empty() {
        Status::Success
    } else {
        Status::Failed(format!("observed order below {threshold}: {}", low.join("; ")))
    };
    let mut outcome = Outcome::new(status)
        .with("fields", fields.len())
        .with("max_residual", worst_residual)
        .with("order_threshold", threshold);
    if worst_order.is_finite() {
        outcome = outcome.with("min_order", worst_order);
    }
    if let Some(note) = eigen_note {
        outcome = outcome.with("eigen_check_skipped", note);
    }
    Ok(outcome)
}

fn append_fd(table: &mut String, prefix: &str, report: &FdReport) {
    for r in &report.rows {
        let _ = writeln!(
            table,
            "{prefix},{:e},{},{},{},{:.6e},{}",
            r.step,
            r.branch,
            e(r.fd_slope),
            e(r.predicted),
            r.rel_err,
            r.flagged
        );
    }
}

fn target_group(groups: &[EigenGroup], target: Option<usize>) -> Result<Option<EigenGroup>, CliError> {
    Ok(match target {
        Some(i) => {
            let g = groups
                .iter()
                .find(|g| g.members.contains(&i))
                .ok_or_else(|| CliError::config(format!("target index {i} is beyond the computed spectrum")))?;
            g.is_multiple().then(|| g.clone())
        }
        None => groups.iter().find(|g| g.is_multiple()).cloned(),
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_split(
    cfg: &RunConfig,
    mesh: &Mesh,
    spec: &ProblemSpec,
    target: Option<usize>,
    family: &[Perturbation],
    budget: f64,
    gap_tol: f64,
    search: SearchOptions,
    fd_steps: &[f64],
    out: &mut OutputDir,
) -> Result<Outcome, CliError> {
    let k = cfg.solver.k.max(target.map_or(0, |t| t + 2));
    let (_, sol) = solve(mesh, spec, k)?;
    let groups = leading_groups(&sol, k, cfg.solver.cluster_tol);
    let Some(group) = target_group(&groups, target)? else {
        return Ok(Outcome::new(Status::Inconclusive("no multiple eigenvalue to split".into())));
    };
    if family.is_empty() {
        return Err(CliError::config("the candidate family is empty"));
    }
    let outcome = best_splitting_perturbation(mesh, spec, &sol, &group, family, budget, search)?;
    let choice = match &outcome {
        SplitOutcome::Found(c) => c.clone(),
        SplitOutcome::NoSplitFound { best_score, .. } => {
            out.write_json("split.json", &json!({ "target": group.members, "outcome": outcome }))?;
            return Ok(Outcome::new(Status::Inconclusive("no candidate splits the group".into()))
                .with("target", group.members.clone())
                .with("best_score", *best_score));
        }
    };
    let slopes = choice.predicted_slopes(&group);
    let violation = match &choice.perturbation {
        Perturbation::Shape(psi) => psi.support_violation(mesh),
        Perturbation::Coefficient(_) => 0.0,
    };
    out.write_json(
        "split.json",
        &json!({
            "target": group.members,
            "lambda_bar": group.lambda,
            "budget": budget,
            "predicted_slopes": slopes,
            "support_violation": violation,
            "outcome": outcome,
        }),
    )?;
    let step = split_step(mesh, spec, &sol, &group, &choice, gap_tol)?;
    out.write_json("step.json", &json!({ "accepted_t": step.t, "attempts": step.attempts }))?;
    let after = cluster_eigen(&step.solution.lambda, gap_tol);
    out.write("spectrum_after.csv", spectrum_csv(&step.solution, &after).as_bytes())?;
    if let (Perturbation::Shape(psi), false) = (&choice.perturbation, fd_steps.is_empty()) {
        match fd_eigenvalue_check(mesh, spec, psi, &group, fd_steps) {
            Ok(report) => {
                let mut table = String::from("step,branch,fd_slope,predicted,rel_err,flagged\n");
                for r in &report.rows {
                    let _ = writeln!(
                        table,
                        "{:e},{},{},{},{:.6e},{}",
                        r.step,
                        r.branch,
                        e(r.fd_slope),
                        e(r.predicted),
                        r.rel_err,
                        r.flagged
                    );
                }
                out.write("split_fd.csv", table.as_bytes())?;
            }
            Err(steklov_core::Error::NotApplicable(_)) => {}
            Err(err) => return Err(err.into()),
        }
    }
    let status = match step.t {
        Some(_) => Status::Success,
        None => Status::Inconclusive("the chosen perturbation did not open the gap".into()),
    };
    Ok(Outcome::new(status)
        .with("target", group.members.clone())
        .with("score", choice.score)
        .with("accepted_t", step.t.map_or(Value::Null, Value::from))
        .with("support_violation", violation))
}

fn write_trace(trace: &SimplifyTrace, mesh: Option<&Mesh>, out: &mut OutputDir) -> Result<Outcome, CliError> {
    out.write_json("trace.json", trace)?;
    let mut series = vec![trace.initial_spectrum.clone()];
    series.extend(trace.steps.iter().filter(|s| s.t.is_some()).map(|s| s.spectrum_after.clone()));
    let mut table = String::from("step,index,lambda\n");
    for (s, row) in series.iter().enumerate() {
        for (i, l) in row.iter().enumerate() {
            let _ = writeln!(table, "{s},{i},{}", e(*l));
        }
    }
    out.write("trajectory.csv", table.as_bytes())?;
    let title = format!("{} simplification: eigenvalues per step", trace.mode);
    out.write("trajectory.svg", trajectory_svg(&title, &series).as_bytes())?;
    let mut violation: f64 = 0.0;
    if let (Some(base), Some(fin)) = (mesh, trace.final_mesh.as_ref()) {
        out.write_json("final_mesh.json", &MeshDoc::from(fin))?;
        for step in &trace.steps {
            if let Some(Perturbation::Shape(psi)) = step.choice.as_ref().map(|c| &c.perturbation) {
                violation = violation.max(psi.support_violation(base)).max(psi.support_violation(fin));
            }
        }
    } else {
        out.write_json("final_spec.json", &trace.final_spec)?;
    }
    let status = match trace.termination {
        Termination::Converged => Status::Success,
        other => Status::Inconclusive(format!("terminated: {other:?}")),
    };
    let mut outcome = Outcome::new(status)
        .with("mode", trace.mode.clone())
        .with("termination", format!("{:?}", trace.termination))
        .with("steps", trace.steps.len())
        .with("total_norm", trace.total_norm())
        .with("epsilon", trace.options.epsilon)
        .with("budget_ledger", trace.budget_ledger_holds());
    if trace.final_spectrum.len() > 1 {
        outcome = outcome.with("final_min_gap", trace.final_min_gap());
    }
    if mesh.is_some() {
        outcome = outcome.with("support_violation", violation);
    }
    Ok(outcome)
}

fn cmd_oracle(
    cfg: &RunConfig,
    spec: &ProblemSpec,
    count: usize,
    refine: bool,
    out: &mut OutputDir,
) -> Result<Outcome, CliError> {
    let DomainConfig::Annulus { r_inner, r_outer, n_radial, n_angular, outer } = cfg.domain else {
        return Err(CliError::config("oracle-compare needs an annulus domain"));
    };
    if outer != Tag::S {
        return Err(CliError::config("the oracle assumes the outer circle is tagged S"));
    }
    let modes = match spec.variant {
        Variant::P1 => annulus_modes_p1(r_inner, r_outer, count + 1),
        Variant::P2 => annulus_modes_p2(r_inner, r_outer, count + 1),
        other => return Err(CliError::config(format!("no oracle for variant {other:?}; use P1 or P2"))),
    }
    .map_err(|e| CliError::numeric(format!("oracle: {e}")))?;
    let exact = sorted_spectrum(&modes, count);
    out.write("oracle_modes.csv", oracle_table_csv(&modes).as_bytes())?;
    let mesh_at = |nr: usize, nt: usize| {
        steklov_core::geometry::build_annulus(r_inner, r_outer, nr, nt).map_err(CliError::from)
    };
    let (_, coarse) = solve(&mesh_at(n_radial, n_angular)?, spec, count)?;
    let fine = if refine {
        Some(solve(&mesh_at(2 * n_radial, 2 * n_angular)?, spec, count)?.1)
    } else {
        None
    };
    let mut table = String::from(if refine {
        "index,oracle,fem,rel_err,fem_refined,rel_err_refined,order\n"
    } else {
        "index,oracle,fem,rel_err\n"
    });
    let mut max_err: f64 = 0.0;
    let mut min_order = f64::INFINITY;
    for (i, &x) in exact.iter().enumerate() {
        let err = (coarse.lambda[i] - x).abs() / x;
        max_err = max_err.max(err);
        let _ = write!(table, "{i},{},{},{err:.6e}", e(x), e(coarse.lambda[i]));
        if let Some(f) = &fine {
            let err_f = (f.lambda[i] - x).abs() / x;
            let order = (err / err_f).log2();
            min_order = min_order.min(order);
            let _ = write!(table, ",{},{err_f:.6e},{order:.4}", e(f.lambda[i]));
        }
        table.push('\n');
    }
    out.write("oracle.csv", table.as_bytes())?;
    let mut outcome = Outcome::new(Status::Success).with("count", exact.len()).with("max_rel_err", max_err);
    if min_order.is_finite() {
        outcome = outcome.with("min_order", min_order);
    }
    Ok(outcome)
}

fn cmd_w_scan(
    cfg: &RunConfig,
    mesh: &Mesh,
    spec: &ProblemSpec,
    target: Option<usize>,
    out: &mut OutputDir,
) -> Result<Outcome, CliError> {
    let k = cfg.solver.k.max(target.map_or(0, |t| t + 2));
    let (_, sol) = solve(mesh, spec, k)?;
    let groups = leading_groups(&sol, k, cfg.solver.cluster_tol);
    let Some(group) = target_group(&groups, target)? else {
        return Ok(Outcome::new(Status::Inconclusive("no multiple eigenvalue to scan".into())));
    };
    let report = w_obstruction_scan(mesh, spec, &sol, &group)?;
    let mut values = String::from("r,s,edge,x,y,value\n");
    for v in &report.values {
        let _ = writeln!(values, "{},{},{},{},{},{}", v.r, v.s, v.edge, e(v.midpoint[0]), e(v.midpoint[1]), e(v.value));
    }
    out.write("wscan.csv", values.as_bytes())?;
    let mut summary = String::from("r,s,grad_norm,trace_norm,sum_norm\n");
    let mut largest: f64 = 0.0;
    for &(r, s, g, t, sum) in &report.summary {
        largest = largest.max(sum);
        let _ = writeln!(summary, "{r},{s},{},{},{}", e(g), e(t), e(sum));
    }
    out.write("wscan_summary.csv", summary.as_bytes())?;
    Ok(Outcome::new(Status::Success)
        .with("target", group.members.clone())
        .with("max_sum_norm", largest))
}
