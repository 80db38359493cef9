//! Conforming triangulations of polygonal domains.
//!
//! A [`Mesh`] is immutable once built. It carries the edge table with
//! adjacency, the boundary flags derived from it, and the per-element
//! diameters used by the estimator.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// An edge with its canonical (sorted) vertex pair and adjacent triangles.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub vertices: [usize; 2],
    /// One entry for boundary edges, two for interior edges.
    pub triangles: Vec<usize>,
}

impl Edge {
    pub fn is_boundary(&self) -> bool {
        self.triangles.len() == 1
    }
}

/// Affine map from the reference triangle `(0,0),(1,0),(0,1)` onto an element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementMap {
    pub origin: Point,
    /// Columns are `v1 - v0` and `v2 - v0`.
    pub jacobian: [[f64; 2]; 2],
    /// Rows are the gradients of the reference coordinates.
    pub inverse: [[f64; 2]; 2],
    pub det: f64,
}

impl ElementMap {
    pub fn new(v: [Point; 3]) -> Self {
        let j = [
            [v[1][0] - v[0][0], v[2][0] - v[0][0]],
            [v[1][1] - v[0][1], v[2][1] - v[0][1]],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        let inverse = [
            [j[1][1] / det, -j[0][1] / det],
            [-j[1][0] / det, j[0][0] / det],
        ];
        Self {
            origin: v[0],
            jacobian: j,
            inverse,
            det,
        }
    }

    pub fn area(&self) -> f64 {
        0.5 * self.det.abs()
    }

    /// Reference coordinates to physical point.
    pub fn to_physical(&self, r: Point) -> Point {
        [
            self.origin[0] + self.jacobian[0][0] * r[0] + self.jacobian[0][1] * r[1],
            self.origin[1] + self.jacobian[1][0] * r[0] + self.jacobian[1][1] * r[1],
        ]
    }

    /// Physical point to reference coordinates.
    pub fn to_reference(&self, x: Point) -> Point {
        let d = [x[0] - self.origin[0], x[1] - self.origin[1]];
        [
            self.inverse[0][0] * d[0] + self.inverse[0][1] * d[1],
            self.inverse[1][0] * d[0] + self.inverse[1][1] * d[1],
        ]
    }
}

#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    edges: Vec<Edge>,
    /// `triangle_edges[t][k]` is the edge opposite local vertex `k`.
    triangle_edges: Vec<[usize; 3]>,
    boundary: Vec<bool>,
    diameters: Vec<f64>,
    shape_constant: f64,
}

impl Mesh {
    /// Builds a mesh from raw vertices and triangles. Clockwise triangles are
    /// reoriented; degenerate triangles and non-manifold edges are rejected.
    pub fn from_parts(vertices: Vec<Point>, mut triangles: Vec<[usize; 3]>) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::InvalidArgument("mesh has no triangles".into()));
        }
        for (t, tri) in triangles.iter_mut().enumerate() {
            if tri.iter().any(|&i| i >= vertices.len()) {
                return Err(Error::InvalidArgument(format!(
                    "triangle {t} references a missing vertex"
                )));
            }
            let det = ElementMap::new(tri.map(|i| vertices[i])).det;
            if !(det.abs() > 0.0) {
                return Err(Error::InvalidArgument(format!("triangle {t} is degenerate")));
            }
            if det < 0.0 {
                tri.swap(1, 2);
            }
        }

        let mut index: HashMap<[usize; 2], usize> = HashMap::new();
        let mut edges: Vec<Edge> = Vec::new();
        let mut triangle_edges = Vec::with_capacity(triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            let mut local = [0usize; 3];
            for (k, slot) in local.iter_mut().enumerate() {
                let a = tri[(k + 1) % 3];
                let b = tri[(k + 2) % 3];
                let key = [a.min(b), a.max(b)];
                let id = *index.entry(key).or_insert_with(|| {
                    edges.push(Edge {
                        vertices: key,
                        triangles: Vec::with_capacity(2),
                    });
                    edges.len() - 1
                });
                edges[id].triangles.push(t);
                if edges[id].triangles.len() > 2 {
                    return Err(Error::InvalidArgument(format!(
                        "edge {key:?} is shared by more than two triangles"
                    )));
                }
                *slot = id;
            }
            triangle_edges.push(local);
        }

        let mut boundary = vec![false; vertices.len()];
        for e in edges.iter().filter(|e| e.is_boundary()) {
            boundary[e.vertices[0]] = true;
            boundary[e.vertices[1]] = true;
        }

        let mut diameters = Vec::with_capacity(triangles.len());
        let mut shape_constant: f64 = 0.0;
        for tri in &triangles {
            let p = tri.map(|i| vertices[i]);
            let lens = [dist(p[1], p[2]), dist(p[2], p[0]), dist(p[0], p[1])];
            let h = lens.iter().cloned().fold(0.0, f64::max);
            let area = ElementMap::new(p).area();
            let inradius = 2.0 * area / lens.iter().sum::<f64>();
            shape_constant = shape_constant.max(h / inradius);
            diameters.push(h);
        }

        Ok(Self {
            vertices,
            triangles,
            edges,
            triangle_edges,
            boundary,
            diameters,
            shape_constant,
        })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edges of triangle `t`, indexed by the opposite local vertex.
    pub fn triangle_edges(&self, t: usize) -> [usize; 3] {
        self.triangle_edges[t]
    }

    pub fn is_boundary_vertex(&self, v: usize) -> bool {
        self.boundary[v]
    }

    pub fn boundary_flags(&self) -> &[bool] {
        &self.boundary
    }

    /// Element diameter `h_E` (longest edge).
    pub fn diameter(&self, t: usize) -> f64 {
        self.diameters[t]
    }

    /// Global meshsize `h = max_E h_E`.
    pub fn meshsize(&self) -> f64 {
        self.diameters.iter().cloned().fold(0.0, f64::max)
    }

    /// Largest ratio `h_E / inradius_E` over all elements.
    pub fn shape_constant(&self) -> f64 {
        self.shape_constant
    }

    pub fn element_vertices(&self, t: usize) -> [Point; 3] {
        self.triangles[t].map(|i| self.vertices[i])
    }

    pub fn element_map(&self, t: usize) -> ElementMap {
        ElementMap::new(self.element_vertices(t))
    }

    pub fn area(&self, t: usize) -> f64 {
        self.element_map(t).area()
    }

    /// Vertices not on the boundary, in increasing order.
    pub fn interior_vertices(&self) -> Vec<usize> {
        (0..self.vertices.len()).filter(|&v| !self.boundary[v]).collect()
    }

    /// Outward unit normal of edge `edge` with respect to triangle `t`.
    pub fn outward_normal(&self, t: usize, edge: usize) -> [f64; 2] {
        let [a, b] = self.edges[edge].vertices;
        let (pa, pb) = (self.vertices[a], self.vertices[b]);
        let len = dist(pa, pb);
        let mut n = [(pb[1] - pa[1]) / len, -(pb[0] - pa[0]) / len];
        let opposite = self.triangles[t]
            .iter()
            .copied()
            .find(|&v| v != a && v != b)
            .expect("edge belongs to triangle");
        let po = self.vertices[opposite];
        let mid = [(pa[0] + pb[0]) * 0.5, (pa[1] + pb[1]) * 0.5];
        if (po[0] - mid[0]) * n[0] + (po[1] - mid[1]) * n[1] > 0.0 {
            n = [-n[0], -n[1]];
        }
        n
    }

    pub fn edge_length(&self, edge: usize) -> f64 {
        let [a, b] = self.edges[edge].vertices;
        dist(self.vertices[a], self.vertices[b])
    }

    /// Checks conformity, orientation and the diameter invariant.
    pub fn validate(&self) -> Result<()> {
        for (t, tri) in self.triangles.iter().enumerate() {
            if self.element_map(t).det <= 0.0 {
                return Err(Error::InvalidArgument(format!("triangle {t} is not positively oriented")));
            }
            let p = tri.map(|i| self.vertices[i]);
            let longest = [dist(p[1], p[2]), dist(p[2], p[0]), dist(p[0], p[1])]
                .into_iter()
                .fold(0.0, f64::max);
            if longest != self.diameters[t] {
                return Err(Error::InvalidArgument(format!("diameter mismatch on {t}")));
            }
        }
        let mut count: HashMap<[usize; 2], usize> = HashMap::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *count.entry([a.min(b), a.max(b)]).or_default() += 1;
            }
        }
        for e in &self.edges {
            let n = count.get(&e.vertices).copied().unwrap_or(0);
            if n != e.triangles.len() || n == 0 || n > 2 {
                return Err(Error::InvalidArgument(format!("edge {:?} is non-conforming", e.vertices)));
            }
        }
        Ok(())
    }

    /// Writes the plain-text dump: `nv nt`, vertex lines, triangle lines.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        let mut s = String::new();
        writeln!(s, "{} {}", self.vertices.len(), self.triangles.len()).unwrap();
        for v in &self.vertices {
            writeln!(s, "{:?} {:?}", v[0], v[1]).unwrap();
        }
        for t in &self.triangles {
            writeln!(s, "{} {} {}", t[0], t[1], t[2]).unwrap();
        }
        out.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn read_text<R: Read>(input: R) -> Result<Self> {
        let reader = BufReader::new(input);
        let mut lines = reader
            .lines()
            .map(|l| l.map_err(Error::from))
            .filter(|l| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true));
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty mesh file".into()))??;
        let mut it = header.split_whitespace();
        let nv: usize = parse_field(it.next(), "vertex count")?;
        let nt: usize = parse_field(it.next(), "triangle count")?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse("truncated vertex list".into()))??;
            let mut it = line.split_whitespace();
            vertices.push([parse_field(it.next(), "x")?, parse_field(it.next(), "y")?]);
        }
        let mut triangles = Vec::with_capacity(nt);
        for _ in 0..nt {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse("truncated triangle list".into()))??;
            let mut it = line.split_whitespace();
            triangles.push([
                parse_field(it.next(), "i")?,
                parse_field(it.next(), "j")?,
                parse_field(it.next(), "k")?,
            ]);
        }
        Self::from_parts(vertices, triangles)
    }
}

fn parse_field<T: std::str::FromStr>(tok: Option<&str>, what: &str) -> Result<T> {
    tok.ok_or_else(|| Error::Parse(format!("missing {what}")))?
        .parse()
        .map_err(|_| Error::Parse(format!("bad {what}")))
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Structured triangulation of the unit square with `n x n` cells, each split
/// along its lower-left to upper-right diagonal.
pub fn build_structured_unit_square(n: usize) -> Result<Mesh> {
    if n == 0 {
        return Err(Error::InvalidArgument("structured mesh needs n >= 1".into()));
    }
    let step = 1.0 / n as f64;
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            vertices.push([i as f64 * step, j as f64 * step]);
        }
    }
    // exact endpoints, no accumulated rounding at x = 1 or y = 1
    for v in vertices.iter_mut() {
        for c in v.iter_mut() {
            if (*c - 1.0).abs() < 1e-14 {
                *c = 1.0;
            }
        }
    }
    let id = |i: usize, j: usize| j * (n + 1) + i;
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    Mesh::from_parts(vertices, triangles)
}

/// Red refinement: every triangle is split into four congruent children.
pub fn refine_red(mesh: &Mesh) -> Mesh {
    let mut vertices = mesh.vertices.clone();
    let mut midpoint = Vec::with_capacity(mesh.edges.len());
    for e in &mesh.edges {
        let [a, b] = e.vertices;
        let (pa, pb) = (mesh.vertices[a], mesh.vertices[b]);
        vertices.push([(pa[0] + pb[0]) * 0.5, (pa[1] + pb[1]) * 0.5]);
        midpoint.push(vertices.len() - 1);
    }
    let mut triangles = Vec::with_capacity(4 * mesh.triangles.len());
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let [e0, e1, e2] = mesh.triangle_edges[t];
        // m_k is the midpoint of the edge opposite local vertex k
        let (m0, m1, m2) = (midpoint[e0], midpoint[e1], midpoint[e2]);
        triangles.push([tri[0], m2, m1]);
        triangles.push([m2, tri[1], m0]);
        triangles.push([m1, m0, tri[2]]);
        triangles.push([m0, m1, m2]);
    }
    Mesh::from_parts(vertices, triangles).expect("red refinement preserves validity")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn smallest_square() {
        let m = build_structured_unit_square(1).unwrap();
        assert_eq!(m.num_vertices(), 4);
        assert_eq!(m.num_triangles(), 2);
        assert_relative_eq!(m.meshsize(), 2f64.sqrt(), epsilon = 1e-15);
        assert!(m.interior_vertices().is_empty());
    }

    #[test]
    fn rejects_zero() {
        assert!(build_structured_unit_square(0).is_err());
    }

    #[test]
    fn euler_counts_n4() {
        let m = build_structured_unit_square(4).unwrap();
        assert_eq!(m.num_vertices(), 25);
        assert_eq!(m.num_triangles(), 32);
        assert_eq!(m.num_edges(), 56);
        // V - E + F = 2 with the outer face
        assert_eq!(25 - 56 + 33, 2);
        assert_eq!(m.interior_vertices().len(), 9);
    }

    #[test]
    fn conformity_n2() {
        let m = build_structured_unit_square(2).unwrap();
        for e in m.edges() {
            let on_boundary = e.vertices.iter().all(|&v| {
                let p = m.vertices()[v];
                p[0] == 0.0 || p[0] == 1.0 || p[1] == 0.0 || p[1] == 1.0
            }) && {
                let [a, b] = e.vertices;
                let (pa, pb) = (m.vertices()[a], m.vertices()[b]);
                pa[0] == pb[0] && (pa[0] == 0.0 || pa[0] == 1.0)
                    || pa[1] == pb[1] && (pa[1] == 0.0 || pa[1] == 1.0)
            };
            assert_eq!(e.triangles.len(), if on_boundary { 1 } else { 2 });
        }
        assert_eq!(m.interior_vertices(), vec![4]);
        m.validate().unwrap();
    }

    #[test]
    fn red_refinement_counts() {
        let m = build_structured_unit_square(1).unwrap();
        let r = refine_red(&m);
        assert_eq!(r.num_triangles(), 8);
        r.validate().unwrap();
        let m4 = build_structured_unit_square(4).unwrap();
        let r4 = refine_red(&m4);
        assert_relative_eq!(r4.meshsize(), 2f64.sqrt() / 8.0, epsilon = 1e-15);
        let rr = refine_red(&r4);
        assert_eq!(rr.num_triangles(), 16 * m4.num_triangles());
        assert_relative_eq!(rr.meshsize(), m4.meshsize() / 4.0, epsilon = 1e-15);
        assert_relative_eq!(rr.shape_constant(), m4.shape_constant(), max_relative = 1e-12);
    }

    #[test]
    fn normals_point_outward() {
        let m = build_structured_unit_square(2).unwrap();
        for t in 0..m.num_triangles() {
            let map = m.element_map(t);
            let c = map.to_physical([1.0 / 3.0, 1.0 / 3.0]);
            for &e in &m.triangle_edges(t) {
                let n = m.outward_normal(t, e);
                let [a, _] = m.edges()[e].vertices;
                let p = m.vertices()[a];
                assert!((p[0] - c[0]) * n[0] + (p[1] - c[1]) * n[1] > 0.0);
            }
        }
    }

    #[test]
    fn text_round_trip() {
        let m = refine_red(&build_structured_unit_square(3).unwrap());
        let mut buf = Vec::new();
        m.write_text(&mut buf).unwrap();
        let back = Mesh::read_text(buf.as_slice()).unwrap();
        assert_eq!(back.vertices(), m.vertices());
        assert_eq!(back.triangles(), m.triangles());
    }

    #[test]
    fn map_round_trip() {
        let map = ElementMap::new([[0.2, 0.1], [0.9, 0.3], [0.4, 0.8]]);
        let r = [0.25, 0.6];
        let back = map.to_reference(map.to_physical(r));
        assert_relative_eq!(back[0], r[0], epsilon = 1e-14);
        assert_relative_eq!(back[1], r[1], epsilon = 1e-14);
    }
}
