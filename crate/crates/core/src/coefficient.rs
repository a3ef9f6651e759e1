//! Scalar and matrix coefficient fields sampled at quadrature points.

use serde::{Deserialize, Serialize};

use crate::geometry::{Mat2, Mesh, Point, Tag};

/// A quadrature location: position plus the boundary tag when on an edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Site {
    pub x: Point,
    pub tag: Option<Tag>,
}

impl Site {
    pub fn volume(x: Point) -> Self {
        Site { x, tag: None }
    }

    pub fn edge(x: Point, tag: Tag) -> Self {
        Site { x, tag: Some(tag) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarField {
    Constant {
        value: f64,
    },
    /// `amplitude · cos(k(θ - phase))` about `center`.
    Angular {
        k: f64,
        amplitude: f64,
        #[serde(default)]
        phase: f64,
        #[serde(default)]
        center: Point,
    },
    /// `amplitude · cos(wave·x + phase)`.
    Planar {
        wave: Point,
        amplitude: f64,
        #[serde(default)]
        phase: f64,
    },
    /// One on boundary edges carrying `tag`, zero elsewhere (including the interior).
    Indicator {
        tag: Tag,
    },
    Sum {
        terms: Vec<(f64, ScalarField)>,
    },
}

impl ScalarField {
    pub fn constant(value: f64) -> Self {
        ScalarField::Constant { value }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            ScalarField::Constant { value } => Some(*value),
            _ => None,
        }
    }

    pub fn eval(&self, site: Site) -> f64 {
        let x = site.x;
        match self {
            ScalarField::Constant { value } => *value,
            ScalarField::Angular {
                k,
                amplitude,
                phase,
                center,
            } => {
                let th = (x[1] - center[1]).atan2(x[0] - center[0]);
                amplitude * (k * (th - phase)).cos()
            }
            ScalarField::Planar {
                wave,
                amplitude,
                phase,
            } => amplitude * (wave[0] * x[0] + wave[1] * x[1] + phase).cos(),
            ScalarField::Indicator { tag } => {
                if site.tag == Some(*tag) {
                    1.0
                } else {
                    0.0
                }
            }
            ScalarField::Sum { terms } => terms.iter().map(|(c, f)| c * f.eval(site)).sum(),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        match self {
            ScalarField::Constant { value } => ScalarField::constant(c * value),
            other => ScalarField::Sum {
                terms: vec![(c, other.clone())],
            },
        }
    }

    /// `self + c·other`, keeping constants folded.
    pub fn plus(&self, c: f64, other: &ScalarField) -> Self {
        match (self, other) {
            (ScalarField::Constant { value: a }, ScalarField::Constant { value: b }) => {
                ScalarField::constant(a + c * b)
            }
            (ScalarField::Sum { terms }, _) => {
                let mut terms = terms.clone();
                terms.push((c, other.clone()));
                ScalarField::Sum { terms }
            }
            _ => ScalarField::Sum {
                terms: vec![(1.0, self.clone()), (c, other.clone())],
            },
        }
    }

    /// Largest magnitude over the mesh vertices and boundary edge midpoints
    /// (edge samples carry their tag).
    pub fn sup_estimate(&self, mesh: &Mesh) -> f64 {
        let mut m: f64 = mesh
            .vertices()
            .iter()
            .map(|&x| self.eval(Site::volume(x)).abs())
            .fold(0.0, f64::max);
        for e in mesh.boundary() {
            let (p, q) = (mesh.vertices()[e.a], mesh.vertices()[e.b]);
            for s in [0.0, 0.5, 1.0] {
                let x = [p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])];
                m = m.max(self.eval(Site::edge(x, e.tag)).abs());
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MatrixField {
    /// `s(x) · I`.
    Isotropic { scalar: ScalarField },
    Constant { value: Mat2 },
    /// Symmetric field from three scalar entries.
    Entries {
        xx: ScalarField,
        xy: ScalarField,
        yy: ScalarField,
    },
    Sum { terms: Vec<(f64, MatrixField)> },
}

impl MatrixField {
    pub fn identity() -> Self {
        MatrixField::Constant {
            value: [[1.0, 0.0], [0.0, 1.0]],
        }
    }

    pub fn as_constant(&self) -> Option<Mat2> {
        match self {
            MatrixField::Constant { value } => Some(*value),
            MatrixField::Isotropic { scalar } => scalar.as_constant().map(|c| [[c, 0.0], [0.0, c]]),
            _ => None,
        }
    }

    pub fn eval(&self, site: Site) -> Mat2 {
        match self {
            MatrixField::Isotropic { scalar } => {
                let s = scalar.eval(site);
                [[s, 0.0], [0.0, s]]
            }
            MatrixField::Constant { value } => *value,
            MatrixField::Entries { xx, xy, yy } => {
                let o = xy.eval(site);
                [[xx.eval(site), o], [o, yy.eval(site)]]
            }
            MatrixField::Sum { terms } => {
                let mut m = [[0.0; 2]; 2];
                for (c, f) in terms {
                    let t = f.eval(site);
                    for i in 0..2 {
                        for j in 0..2 {
                            m[i][j] += c * t[i][j];
                        }
                    }
                }
                m
            }
        }
    }

    pub fn plus(&self, c: f64, other: &MatrixField) -> Self {
        if let (Some(a), Some(b)) = (self.as_constant(), other.as_constant()) {
            let mut m = a;
            for i in 0..2 {
                for j in 0..2 {
                    m[i][j] += c * b[i][j];
                }
            }
            return MatrixField::Constant { value: m };
        }
        match self {
            MatrixField::Sum { terms } => {
                let mut terms = terms.clone();
                terms.push((c, other.clone()));
                MatrixField::Sum { terms }
            }
            _ => MatrixField::Sum {
                terms: vec![(1.0, self.clone()), (c, other.clone())],
            },
        }
    }

    /// Largest spectral norm over the mesh vertices.
    pub fn sup_estimate(&self, mesh: &Mesh) -> f64 {
        mesh.vertices()
            .iter()
            .map(|&x| crate::geometry::spectral_norm(&self.eval(Site::volume(x))))
            .fold(0.0, f64::max)
    }
}

/// Smallest eigenvalue of a symmetric 2×2 matrix.
pub fn min_eigenvalue(m: &Mat2) -> f64 {
    let tr = 0.5 * (m[0][0] + m[1][1]);
    let d = 0.5 * (m[0][0] - m[1][1]);
    tr - d.hypot(0.5 * (m[0][1] + m[1][0]))
}
