//! Run configuration: a TOML document with `domain`, `problem`, `solver` and
//! an optional `experiment` section.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use steklov_core::coeffderiv::PerturbationKind;
use steklov_core::coefficient::{MatrixField, ScalarField};
use steklov_core::forms::{ProblemSpec, Variant};
use steklov_core::geometry::{
    build_annulus_tagged, build_rectangle, field_library, DisplacementField, Mesh, MeshDoc, SideTags, Support, Tag,
};
use steklov_core::quadrature::VolumeRule;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; overridden by `--out`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub domain: DomainConfig,
    #[serde(default)]
    pub problem: ProblemConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<Experiment>,
}

fn tag_s() -> Tag {
    Tag::S
}

fn tag_w() -> Tag {
    Tag::W
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainConfig {
    Annulus {
        r_inner: f64,
        r_outer: f64,
        n_radial: usize,
        n_angular: usize,
        /// Tag of the outer circle; the inner one gets the other tag.
        #[serde(default = "tag_s")]
        outer: Tag,
    },
    Rectangle {
        width: f64,
        height: f64,
        nx: usize,
        ny: usize,
        #[serde(default = "tag_s")]
        bottom: Tag,
        #[serde(default = "tag_w")]
        right: Tag,
        #[serde(default = "tag_s")]
        top: Tag,
        #[serde(default = "tag_w")]
        left: Tag,
    },
    /// A mesh document written by a previous run (JSON).
    File { path: PathBuf },
}

fn p1() -> String {
    "P1".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default = "p1")]
    pub variant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub potential: Option<ScalarField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conductivity: Option<MatrixField>,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig { variant: p1(), potential: None, conductivity: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    /// Relative tolerance for grouping eigenvalues.
    #[serde(default = "default_cluster_tol")]
    pub cluster_tol: f64,
    #[serde(default)]
    pub quadrature: VolumeRule,
}

fn default_k() -> usize {
    8
}

fn default_cluster_tol() -> f64 {
    1e-8
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { k: default_k(), cluster_tol: default_cluster_tol(), quadrature: VolumeRule::default() }
    }
}

/// Where shape perturbations may act.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum SupportName {
    #[default]
    S,
    W,
    #[serde(rename = "interior")]
    Interior,
    #[serde(rename = "any")]
    Any,
}

impl SupportName {
    pub fn support(self) -> Support {
        match self {
            SupportName::S => Support::BoundaryS,
            SupportName::W => Support::BoundaryW,
            SupportName::Interior => Support::Interior,
            SupportName::Any => Support::Global,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientKind {
    #[default]
    BoundaryPotential,
    VolumePotential,
    Conductivity,
}

impl CoefficientKind {
    pub fn kind(self) -> PerturbationKind {
        match self {
            CoefficientKind::BoundaryPotential => PerturbationKind::BoundaryPotential,
            CoefficientKind::VolumePotential => PerturbationKind::VolumePotential,
            CoefficientKind::Conductivity => PerturbationKind::MatrixField,
        }
    }
}

/// A library field: family name plus numeric parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub family: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl FieldConfig {
    pub fn build(&self) -> Result<DisplacementField, CliError> {
        field_library(&self.family, &self.params).map_err(|e| CliError::config(format!("field '{}': {e}", self.family)))
    }

    pub fn label(&self) -> String {
        let params: Vec<String> = self.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        if params.is_empty() {
            self.family.clone()
        } else {
            format!("{}({})", self.family, params.join(" "))
        }
    }
}

fn steps_default() -> Vec<f64> {
    vec![1e-2, 5e-3, 2.5e-3]
}
fn order_threshold() -> f64 {
    1.9
}
fn two() -> usize {
    2
}
fn six() -> usize {
    6
}
fn eight() -> usize {
    8
}
fn ten() -> usize {
    10
}
fn thirty_two() -> usize {
    32
}
fn forty_eight() -> usize {
    48
}
fn epsilon() -> f64 {
    0.05
}
fn gap_tol() -> f64 {
    1e-3
}
fn yes() -> bool {
    true
}
fn fd_steps() -> Vec<f64> {
    vec![1e-2, 5e-3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Experiment {
    Solve {
        /// Number of random trial subspaces for the min-max check (0 skips it).
        #[serde(default)]
        minmax_trials: usize,
    },
    DerivCheck {
        /// Fields to test; empty selects a default set for the domain.
        #[serde(default)]
        fields: Vec<FieldConfig>,
        #[serde(default = "steps_default")]
        steps: Vec<f64>,
        #[serde(default = "order_threshold")]
        order_threshold: f64,
        /// Leading eigenvalue groups checked by re-meshing.
        #[serde(default = "two")]
        eigen_groups: usize,
        /// Rescale each field to unit C² norm before checking.
        #[serde(default = "yes")]
        normalize: bool,
    },
    Split {
        /// An eigenvalue index inside the target group; default: first multiple group.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<usize>,
        #[serde(default)]
        support: SupportName,
        #[serde(default = "thirty_two")]
        candidates: usize,
        #[serde(default = "epsilon")]
        budget: f64,
        #[serde(default = "gap_tol")]
        gap_tol: f64,
        #[serde(default = "forty_eight")]
        random_pairs: usize,
        #[serde(default = "fd_steps")]
        fd_steps: Vec<f64>,
    },
    Simplify {
        #[serde(default = "six")]
        count: usize,
        #[serde(default = "epsilon")]
        epsilon: f64,
        #[serde(default = "gap_tol")]
        gap_tol: f64,
        #[serde(default = "ten")]
        max_iter: usize,
        #[serde(default)]
        support: SupportName,
        #[serde(default = "thirty_two")]
        candidates: usize,
        #[serde(default = "forty_eight")]
        random_pairs: usize,
    },
    Coeff {
        #[serde(default)]
        coefficient: CoefficientKind,
        #[serde(default = "six")]
        count: usize,
        #[serde(default = "epsilon")]
        epsilon: f64,
        #[serde(default = "gap_tol")]
        gap_tol: f64,
        #[serde(default = "ten")]
        max_iter: usize,
        #[serde(default = "thirty_two")]
        candidates: usize,
        #[serde(default = "forty_eight")]
        random_pairs: usize,
    },
    OracleCompare {
        #[serde(default = "eight")]
        count: usize,
        /// Also solve on the mesh refined twice in each direction.
        #[serde(default = "yes")]
        refine: bool,
    },
    WScan {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<usize>,
    },
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Solve { .. } => "solve",
            Experiment::DerivCheck { .. } => "deriv-check",
            Experiment::Split { .. } => "split",
            Experiment::Simplify { .. } => "simplify",
            Experiment::Coeff { .. } => "coeff",
            Experiment::OracleCompare { .. } => "oracle-compare",
            Experiment::WScan { .. } => "w-scan",
        }
    }

    /// The block with every parameter at its default.
    pub fn default_for(name: &str) -> Option<Experiment> {
        let doc = format!("kind = \"{name}\"");
        toml::from_str(&doc).ok()
    }

    fn validate(&self) -> Result<(), CliError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(CliError::config(format!("{name} must be positive, got {v}")))
            }
        };
        match self {
            Experiment::DerivCheck { steps, .. } => {
                if steps.is_empty() {
                    return Err(CliError::config("deriv-check needs at least one step"));
                }
                steps.iter().try_for_each(|&s| positive("step", s))
            }
            Experiment::Split { budget, gap_tol, fd_steps, .. } => {
                positive("budget", *budget)?;
                positive("gap_tol", *gap_tol)?;
                fd_steps.iter().try_for_each(|&s| positive("fd step", s))
            }
            Experiment::Simplify { epsilon, gap_tol, count, .. } | Experiment::Coeff { epsilon, gap_tol, count, .. } => {
                positive("epsilon", *epsilon)?;
                positive("gap_tol", *gap_tol)?;
                if *count == 0 {
                    return Err(CliError::config("count must be positive"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.variant()?;
        if self.solver.cluster_tol.is_nan() || self.solver.cluster_tol < 0.0 {
            return Err(CliError::config("solver.cluster_tol must be non-negative"));
        }
        if let DomainConfig::Annulus { r_inner, r_outer, .. } = self.domain {
            if !(r_inner > 0.0 && r_outer > r_inner) {
                return Err(CliError::config("annulus needs 0 < r_inner < r_outer"));
            }
        }
        if let Some(e) = &self.experiment {
            e.validate()?;
        }
        Ok(())
    }

    pub fn variant(&self) -> Result<Variant, CliError> {
        Variant::parse(&self.problem.variant).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn spec(&self) -> Result<ProblemSpec, CliError> {
        let mut spec = ProblemSpec::new(self.variant()?).with_quadrature(self.solver.quadrature);
        if let Some(a) = &self.problem.potential {
            spec = spec.with_potential(a.clone());
        }
        if let Some(a) = &self.problem.conductivity {
            spec = spec.with_conductivity(a.clone());
        }
        Ok(spec)
    }

    pub fn mesh(&self) -> Result<Mesh, CliError> {
        let mesh = match &self.domain {
            DomainConfig::Annulus { r_inner, r_outer, n_radial, n_angular, outer } => {
                build_annulus_tagged(*r_inner, *r_outer, *n_radial, *n_angular, *outer)
            }
            DomainConfig::Rectangle { width, height, nx, ny, bottom, right, top, left } => {
                let sides = SideTags { bottom: *bottom, right: *right, top: *top, left: *left };
                let (w, h) = (*width, *height);
                build_rectangle(w, h, *nx, *ny, |p, q| sides.tag(w, h, p, q))
            }
            DomainConfig::File { path } => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::config(format!("cannot read mesh {}: {e}", path.display())))?;
                let doc: MeshDoc =
                    serde_json::from_str(&text).map_err(|e| CliError::config(format!("mesh {}: {e}", path.display())))?;
                Mesh::new(doc.vertices, doc.triangles, &doc.boundary, doc.meta)
            }
        };
        mesh.map_err(|e| CliError::config(format!("domain: {e}")))
    }

    /// The experiment block for `command`, defaulted when absent.
    pub fn experiment_for(&self, command: &str) -> Result<Experiment, CliError> {
        match &self.experiment {
            Some(e) if e.name() == command => Ok(e.clone()),
            Some(e) => Err(CliError::config(format!(
                "config describes a '{}' experiment but the '{command}' subcommand was run",
                e.name()
            ))),
            None => Experiment::default_for(command)
                .ok_or_else(|| CliError::config(format!("no experiment named '{command}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
seed = 3

[domain]
family = "annulus"
r_inner = 0.5
r_outer = 1.0
n_radial = 4
n_angular = 32

[problem]
variant = "P3a"
potential = { kind = "angular", k = 2.0, amplitude = 0.1, phase = 0.0, center = [0.0, 0.0] }

[solver]
k = 6
quadrature = "degree4"

[experiment]
kind = "simplify"
support = "interior"
epsilon = 0.02
"#;

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::from_toml(FULL).unwrap();
        let again = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
        let Some(Experiment::Simplify { support, epsilon, count, .. }) = &cfg.experiment else { panic!() };
        assert_eq!((*support, *epsilon, *count), (SupportName::Interior, 0.02, 6));
    }

    #[test]
    fn rejects_bad_values() {
        let bad_variant = FULL.replace("P3a", "P9");
        assert!(RunConfig::from_toml(&bad_variant).is_err());
        let bad_budget = FULL.replace("epsilon = 0.02", "epsilon = 0.0");
        assert!(RunConfig::from_toml(&bad_budget).is_err());
        let unknown = FULL.replace("seed = 3", "seed = 3\ncolour = 1");
        assert!(RunConfig::from_toml(&unknown).is_err());
    }

    #[test]
    fn defaults_for_every_experiment() {
        for name in ["solve", "deriv-check", "split", "simplify", "coeff", "oracle-compare", "w-scan"] {
            let e = Experiment::default_for(name).unwrap();
            assert_eq!(e.name(), name);
        }
        assert!(Experiment::default_for("nonsense").is_none());
    }

    #[test]
    fn builds_mesh_and_spec() {
        let cfg = RunConfig::from_toml(FULL).unwrap();
        let mesh = cfg.mesh().unwrap();
        assert_eq!(mesh.meta().family, "annulus");
        assert_eq!(cfg.spec().unwrap().variant, Variant::P3a);
    }
}
