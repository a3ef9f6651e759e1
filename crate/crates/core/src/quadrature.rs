//! Quadrature rules on triangles (barycentric) and edges.

use serde::{Deserialize, Serialize};

/// Volume rule; weights are fractions of the triangle area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeRule {
    Centroid,
    /// 3-point rule exact for quadratics.
    #[default]
    Degree2,
    /// 6-point rule exact for quartics.
    Degree4,
}

impl VolumeRule {
    /// `(barycentric coordinates, weight)` pairs.
    pub fn points(self) -> &'static [([f64; 3], f64)] {
        const T: f64 = 1.0 / 3.0;
        const A: f64 = 2.0 / 3.0;
        const B: f64 = 1.0 / 6.0;
        const P1: f64 = 0.445_948_490_915_965;
        const Q1: f64 = 1.0 - 2.0 * P1;
        const W1: f64 = 0.223_381_589_678_011;
        const P2: f64 = 0.091_576_213_509_771;
        const Q2: f64 = 1.0 - 2.0 * P2;
        const W2: f64 = 0.109_951_743_655_322;
        match self {
            VolumeRule::Centroid => &[([T, T, T], 1.0)],
            VolumeRule::Degree2 => &[
                ([A, B, B], T),
                ([B, A, B], T),
                ([B, B, A], T),
            ],
            VolumeRule::Degree4 => &[
                ([Q1, P1, P1], W1),
                ([P1, Q1, P1], W1),
                ([P1, P1, Q1], W1),
                ([Q2, P2, P2], W2),
                ([P2, Q2, P2], W2),
                ([P2, P2, Q2], W2),
            ],
        }
    }

    pub fn from_order(order: usize) -> Self {
        match order {
            0 | 1 => VolumeRule::Centroid,
            2 => VolumeRule::Degree2,
            _ => VolumeRule::Degree4,
        }
    }
}

/// Two-point Gauss rule on `[0, 1]`: `(s, weight)`. Never touches endpoints.
pub fn edge_gauss() -> [(f64, f64); 2] {
    let d = 0.5 / 3f64.sqrt();
    [(0.5 - d, 0.5), (0.5 + d, 0.5)]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn monomial(rule: VolumeRule, i: i32, j: i32) -> f64 {
        // ∫ over the reference triangle of x^i y^j divided by its area 1/2
        rule.points()
            .iter()
            .map(|(l, w)| w * l[1].powi(i) * l[2].powi(j))
            .sum()
    }

    fn exact(i: i32, j: i32) -> f64 {
        let f = |n: i32| (1..=n).map(f64::from).product::<f64>();
        2.0 * f(i) * f(j) / f(i + j + 2)
    }

    #[test]
    fn rules_integrate_their_degree() {
        for (rule, deg) in [(VolumeRule::Centroid, 1), (VolumeRule::Degree2, 2), (VolumeRule::Degree4, 4)] {
            let wsum: f64 = rule.points().iter().map(|p| p.1).sum();
            assert!((wsum - 1.0).abs() < 1e-14);
            for i in 0..=deg {
                for j in 0..=(deg - i) {
                    let e = (monomial(rule, i, j) - exact(i, j)).abs();
                    assert!(e < 1e-13, "{rule:?} x^{i} y^{j}: {e}");
                }
            }
        }
    }

    #[test]
    fn edge_rule_is_exact_for_cubics() {
        let q: f64 = edge_gauss().iter().map(|(s, w)| w * s.powi(3)).sum();
        assert!((q - 0.25).abs() < 1e-15);
    }
}
