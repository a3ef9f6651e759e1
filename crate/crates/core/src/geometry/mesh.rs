use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::field::DisplacementField;

pub type Point = [f64; 2];

/// Boundary class of an edge: Steklov part `S` (d = 1) or Robin/Neumann part `W` (d = 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tag {
    S,
    W,
}

impl Tag {
    /// The indicator `d = 𝟙_S`.
    pub fn indicator(self) -> f64 {
        match self {
            Tag::S => 1.0,
            Tag::W => 0.0,
        }
    }
}

/// Boundary edge oriented so the domain lies on its left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryEdge {
    pub a: usize,
    pub b: usize,
    pub tag: Tag,
    pub triangle: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MeshMeta {
    pub family: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

/// Conforming P1 triangulation of a 2D domain with a tagged boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    boundary: Vec<BoundaryEdge>,
    edges: Vec<[usize; 2]>,
    edge_boundary: Vec<Option<usize>>,
    meta: MeshMeta,
}

pub(crate) fn signed_area(p: Point, q: Point, r: Point) -> f64 {
    0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1]))
}

fn key(a: usize, b: usize) -> [usize; 2] {
    if a < b {
        [a, b]
    } else {
        [b, a]
    }
}

impl Mesh {
    /// Builds a mesh from counterclockwise triangles; boundary edges are the
    /// edges used by exactly one triangle and are tagged by `tag_of(a, b)`.
    pub fn from_triangles(
        vertices: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        tag_of: impl Fn(Point, Point) -> Tag,
        meta: MeshMeta,
    ) -> Result<Self> {
        let mut uses: HashMap<[usize; 2], (usize, usize, usize, usize)> = HashMap::new();
        for (t, tri) in triangles.iter().enumerate() {
            for e in 0..3 {
                let (a, b) = (tri[e], tri[(e + 1) % 3]);
                uses.entry(key(a, b))
                    .and_modify(|u| u.0 += 1)
                    .or_insert((1, a, b, t));
            }
        }
        let mut boundary: Vec<BoundaryEdge> = uses
            .values()
            .filter(|u| u.0 == 1)
            .map(|&(_, a, b, t)| BoundaryEdge {
                a,
                b,
                tag: Tag::W,
                triangle: t,
            })
            .collect();
        boundary.sort_by_key(|e| (e.triangle, e.a, e.b));
        for e in &mut boundary {
            e.tag = tag_of(vertices[e.a], vertices[e.b]);
        }
        Self::assemble(vertices, triangles, boundary, meta)
    }

    /// Builds a mesh from an explicit boundary list `(a, b, tag)`; the list
    /// must contain exactly the edges used by one triangle.
    pub fn new(
        vertices: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        boundary: &[(usize, usize, Tag)],
        meta: MeshMeta,
    ) -> Result<Self> {
        let mut owner: HashMap<[usize; 2], (usize, usize, usize, usize)> = HashMap::new();
        for (t, tri) in triangles.iter().enumerate() {
            for e in 0..3 {
                let (a, b) = (tri[e], tri[(e + 1) % 3]);
                owner
                    .entry(key(a, b))
                    .and_modify(|u| u.0 += 1)
                    .or_insert((1, a, b, t));
            }
        }
        let mut edges = Vec::with_capacity(boundary.len());
        for &(a, b, tag) in boundary {
            let Some(&(count, oa, ob, t)) = owner.get(&key(a, b)) else {
                return Err(Error::Mesh(format!("boundary edge ({a},{b}) is not a mesh edge")));
            };
            if count != 1 {
                return Err(Error::Mesh(format!(
                    "boundary edge ({a},{b}) is shared by {count} triangles"
                )));
            }
            edges.push(BoundaryEdge {
                a: oa,
                b: ob,
                tag,
                triangle: t,
            });
        }
        let open = owner.values().filter(|u| u.0 == 1).count();
        if open != boundary.len() {
            return Err(Error::Mesh(format!(
                "{open} edges belong to a single triangle but {} boundary edges were given",
                boundary.len()
            )));
        }
        Self::assemble(vertices, triangles, edges, meta)
    }

    fn assemble(
        vertices: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        boundary: Vec<BoundaryEdge>,
        meta: MeshMeta,
    ) -> Result<Self> {
        let n = vertices.len();
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= n) {
                return Err(Error::Mesh(format!("triangle {t} references a missing vertex")));
            }
            let area = signed_area(vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]);
            if area <= 0.0 {
                return Err(Error::Mesh(format!(
                    "triangle {t} has non-positive signed area {area:e}"
                )));
            }
        }
        let (has_s, has_w) = boundary.iter().fold((false, false), |(s, w), e| {
            (s || e.tag == Tag::S, w || e.tag == Tag::W)
        });
        if !has_s || !has_w {
            return Err(Error::Partition(format!(
                "both tags must be present (S: {has_s}, W: {has_w})"
            )));
        }
        // closed polylines: every boundary vertex starts exactly one edge and ends one
        let mut balance: HashMap<usize, (u32, u32)> = HashMap::new();
        for e in &boundary {
            balance.entry(e.a).or_default().0 += 1;
            balance.entry(e.b).or_default().1 += 1;
        }
        if let Some((v, _)) = balance.iter().find(|(_, &(o, i))| o != 1 || i != 1) {
            return Err(Error::Mesh(format!(
                "boundary is not a union of simple closed polylines at vertex {v}"
            )));
        }

        let mut edge_map: BTreeMap<[usize; 2], Option<usize>> = BTreeMap::new();
        for tri in &triangles {
            for e in 0..3 {
                edge_map.insert(key(tri[e], tri[(e + 1) % 3]), None);
            }
        }
        for (i, e) in boundary.iter().enumerate() {
            edge_map.insert(key(e.a, e.b), Some(i));
        }
        let (edges, edge_boundary) = edge_map.into_iter().unzip();
        Ok(Mesh {
            vertices,
            triangles,
            boundary,
            edges,
            edge_boundary,
            meta,
        })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary(&self) -> &[BoundaryEdge] {
        &self.boundary
    }

    /// All unique edges as sorted vertex pairs.
    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn meta(&self) -> &MeshMeta {
        &self.meta
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        signed_area(self.vertices[a], self.vertices[b], self.vertices[c])
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn edge_length(&self, e: &BoundaryEdge) -> f64 {
        let (p, q) = (self.vertices[e.a], self.vertices[e.b]);
        (q[0] - p[0]).hypot(q[1] - p[1])
    }

    pub fn perimeter(&self) -> f64 {
        self.boundary.iter().map(|e| self.edge_length(e)).sum()
    }

    pub fn count_tag(&self, tag: Tag) -> usize {
        self.boundary.iter().filter(|e| e.tag == tag).count()
    }

    /// Outward unit normal of a boundary edge (by position in [`Mesh::boundary`]).
    pub fn outward_normal(&self, e: &BoundaryEdge) -> Point {
        let (p, q) = (self.vertices[e.a], self.vertices[e.b]);
        let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
        let len = dx.hypot(dy);
        [dy / len, -dx / len]
    }

    /// Vertices lying on at least one edge of the given tag.
    pub fn tagged_vertices(&self, tag: Tag) -> Vec<usize> {
        let mut on = vec![false; self.vertices.len()];
        for e in self.boundary.iter().filter(|e| e.tag == tag) {
            on[e.a] = true;
            on[e.b] = true;
        }
        (0..on.len()).filter(|&v| on[v]).collect()
    }

    /// Interface Γ = S ∩ W: vertices where the tag changes.
    pub fn interface_vertices(&self) -> Vec<usize> {
        let s = self.tagged_vertices(Tag::S);
        let w = self.tagged_vertices(Tag::W);
        s.into_iter().filter(|v| w.binary_search(v).is_ok()).collect()
    }

    pub fn bounding_box(&self) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.vertices {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        (lo, hi)
    }

    pub fn centroid(&self) -> Point {
        let (lo, hi) = self.bounding_box();
        [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])]
    }

    /// Sample points covering the closed domain: vertices, triangle centroids
    /// and boundary edge midpoints.
    pub fn sample_points(&self) -> Vec<Point> {
        let mut pts = self.vertices.clone();
        for tri in &self.triangles {
            let (a, b, c) = (self.vertices[tri[0]], self.vertices[tri[1]], self.vertices[tri[2]]);
            pts.push([(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]);
        }
        for e in &self.boundary {
            let (p, q) = (self.vertices[e.a], self.vertices[e.b]);
            pts.push([0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])]);
        }
        pts
    }

    /// Same connectivity and tags with vertices replaced.
    pub fn with_vertices(&self, vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::Argument("vertex count mismatch".into()));
        }
        if let Some((t, area)) = self
            .triangles
            .iter()
            .enumerate()
            .map(|(t, tri)| (t, signed_area(vertices[tri[0]], vertices[tri[1]], vertices[tri[2]])))
            .min_by(|a, b| a.1.total_cmp(&b.1))
        {
            if area <= 0.0 {
                return Err(Error::Deformation {
                    element: t,
                    measure: area,
                });
            }
        }
        Ok(Mesh {
            vertices,
            ..self.clone()
        })
    }

    /// Copy with vertices renumbered: new index of old vertex `v` is `perm[v]`.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Self> {
        let n = self.vertices.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Argument("relabeling is not a permutation".into()));
        }
        let mut vertices = vec![[0.0; 2]; n];
        for (v, &p) in perm.iter().enumerate() {
            vertices[p] = self.vertices[v];
        }
        let triangles = self
            .triangles
            .iter()
            .map(|t| [perm[t[0]], perm[t[1]], perm[t[2]]])
            .collect();
        let boundary: Vec<_> = self
            .boundary
            .iter()
            .map(|e| (perm[e.a], perm[e.b], e.tag))
            .collect();
        Mesh::new(vertices, triangles, &boundary, self.meta.clone())
    }
}

/// Outward unit normal of a mesh edge given by its index in [`Mesh::edges`].
pub fn boundary_normal(mesh: &Mesh, edge: usize) -> Result<Point> {
    let b = mesh
        .edge_boundary
        .get(edge)
        .ok_or_else(|| Error::Argument(format!("edge index {edge} out of range")))?
        .ok_or_else(|| Error::Argument(format!("edge {edge} is an interior edge")))?;
    Ok(mesh.outward_normal(&mesh.boundary[b]))
}

/// Index in [`Mesh::edges`] of the edge joining `a` and `b`.
pub fn edge_index(mesh: &Mesh, a: usize, b: usize) -> Option<usize> {
    mesh.edges.binary_search(&key(a, b)).ok()
}

/// Annulus `r_inner < |x| < r_outer` with outer circle `S` and inner circle `W`.
pub fn build_annulus(r_inner: f64, r_outer: f64, n_radial: usize, n_angular: usize) -> Result<Mesh> {
    build_annulus_tagged(r_inner, r_outer, n_radial, n_angular, Tag::S)
}

/// Annulus with the given tag on the outer circle and the other on the inner.
///
/// Cells alternate their diagonal in a checkerboard pattern; for even
/// `n_angular` the mesh is invariant under rotation by two angular cells and
/// under the reflection `y → -y`.
pub fn build_annulus_tagged(
    r_inner: f64,
    r_outer: f64,
    n_radial: usize,
    n_angular: usize,
    outer: Tag,
) -> Result<Mesh> {
    if !(r_inner > 0.0 && r_outer > r_inner && r_outer.is_finite()) {
        return Err(Error::Argument(format!(
            "annulus radii must satisfy 0 < r_inner < r_outer (got {r_inner}, {r_outer})"
        )));
    }
    if n_radial < 1 || n_angular < 8 {
        return Err(Error::Argument(format!(
            "annulus needs n_radial >= 1 and n_angular >= 8 (got {n_radial}, {n_angular})"
        )));
    }
    let mut vertices = Vec::with_capacity((n_radial + 1) * n_angular);
    for i in 0..=n_radial {
        let r = r_inner + (r_outer - r_inner) * i as f64 / n_radial as f64;
        for j in 0..n_angular {
            let th = 2.0 * PI * j as f64 / n_angular as f64;
            vertices.push([r * th.cos(), r * th.sin()]);
        }
    }
    let idx = |i: usize, j: usize| i * n_angular + (j % n_angular);
    let mut triangles = Vec::with_capacity(2 * n_radial * n_angular);
    for i in 0..n_radial {
        for j in 0..n_angular {
            let (v00, v01, v10, v11) = (idx(i, j), idx(i, j + 1), idx(i + 1, j), idx(i + 1, j + 1));
            let pair = if (i + j) % 2 == 0 {
                [[v00, v01, v11], [v00, v11, v10]]
            } else {
                [[v00, v01, v10], [v01, v11, v10]]
            };
            for mut t in pair {
                if signed_area(vertices[t[0]], vertices[t[1]], vertices[t[2]]) < 0.0 {
                    t.swap(1, 2);
                }
                triangles.push(t);
            }
        }
    }
    let mid = 0.5 * (r_inner + r_outer);
    let inner = match outer {
        Tag::S => Tag::W,
        Tag::W => Tag::S,
    };
    let meta = MeshMeta {
        family: "annulus".into(),
        params: BTreeMap::from([
            ("r_inner".into(), r_inner),
            ("r_outer".into(), r_outer),
            ("n_radial".into(), n_radial as f64),
            ("n_angular".into(), n_angular as f64),
            ("outer_is_s".into(), if outer == Tag::S { 1.0 } else { 0.0 }),
        ]),
    };
    Mesh::from_triangles(
        vertices,
        triangles,
        |p, _| if p[0].hypot(p[1]) > mid { outer } else { inner },
        meta,
    )
}

/// Tags of the four sides of a rectangle `[0, w] × [0, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideTags {
    pub bottom: Tag,
    pub right: Tag,
    pub top: Tag,
    pub left: Tag,
}

impl SideTags {
    /// Tag of a boundary edge of the rectangle `[0, w] × [0, h]`.
    pub fn tag(&self, w: f64, h: f64, p: Point, q: Point) -> Tag {
        let m = [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])];
        let eps = 1e-9 * w.max(h);
        if m[1].abs() <= eps {
            self.bottom
        } else if (m[1] - h).abs() <= eps {
            self.top
        } else if m[0].abs() <= eps {
            self.left
        } else {
            self.right
        }
    }
}

/// Structured triangulation of `[0, width] × [0, height]` with `nx × ny` cells,
/// each split along its rising diagonal; boundary edges are tagged by `tag_rule`
/// evaluated on the edge endpoints.
pub fn build_rectangle(
    width: f64,
    height: f64,
    nx: usize,
    ny: usize,
    tag_rule: impl Fn(Point, Point) -> Tag,
) -> Result<Mesh> {
    if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
        return Err(Error::Argument(format!(
            "rectangle dimensions must be positive (got {width} × {height})"
        )));
    }
    if nx < 1 || ny < 1 {
        return Err(Error::Argument("rectangle needs at least one cell per direction".into()));
    }
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            vertices.push([width * i as f64 / nx as f64, height * j as f64 / ny as f64]);
        }
    }
    let idx = |i: usize, j: usize| j * (nx + 1) + i;
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            triangles.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            triangles.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    let meta = MeshMeta {
        family: "rectangle".into(),
        params: BTreeMap::from([
            ("width".into(), width),
            ("height".into(), height),
            ("nx".into(), nx as f64),
            ("ny".into(), ny as f64),
        ]),
    };
    Mesh::from_triangles(vertices, triangles, tag_rule, meta)
}

/// Maps every vertex `x ↦ x + t ψ(x)`; connectivity and tags are kept.
pub fn deform(mesh: &Mesh, psi: &DisplacementField, t: f64) -> Result<Mesh> {
    if t == 0.0 {
        return Ok(mesh.clone());
    }
    let vertices = mesh
        .vertices
        .iter()
        .map(|&x| {
            let v = psi.value(x);
            [x[0] + t * v[0], x[1] + t * v[1]]
        })
        .collect();
    mesh.with_vertices(vertices)
}

/// On-disk mesh document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeshDoc {
    pub vertices: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary: Vec<(usize, usize, Tag)>,
    #[serde(default)]
    pub meta: MeshMeta,
}

impl From<&Mesh> for MeshDoc {
    fn from(m: &Mesh) -> Self {
        MeshDoc {
            vertices: m.vertices.clone(),
            triangles: m.triangles.clone(),
            boundary: m.boundary.iter().map(|e| (e.a, e.b, e.tag)).collect(),
            meta: m.meta.clone(),
        }
    }
}

impl TryFrom<MeshDoc> for Mesh {
    type Error = Error;

    fn try_from(doc: MeshDoc) -> Result<Self> {
        Mesh::new(doc.vertices, doc.triangles, &doc.boundary, doc.meta)
    }
}

impl Mesh {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&MeshDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MeshDoc = serde_json::from_str(text)?;
        doc.try_into()
    }
}
