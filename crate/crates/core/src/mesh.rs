//! Planar Delaunay triangulations of rectangular regions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn unit() -> Self {
        Self::new(0.0, 0.0, 1.0, 1.0)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn expand(&self, margin: f64) -> Rect {
        Rect::new(self.x0 - margin, self.y0 - margin, self.x1 + margin, self.y1 + margin)
    }

    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangulatedDomain {
    pub vertices: Vec<Point>,
    /// Counter-clockwise vertex triples.
    pub triangles: Vec<[usize; 3]>,
    pub boundary_flags: Vec<bool>,
    pub extension_margin: f64,
}

/// Triangle index plus barycentric weights of a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarycentricLocation {
    pub triangle_index: usize,
    pub weights: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct MeshFile {
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
}

pub(crate) fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

/// Builds a conforming Delaunay triangulation of `region` extended by
/// `extension_margin` on every side.
///
/// When `target_edge_length` divides both sides of the extended rectangle the
/// result is a regular grid whose cells are split along alternating
/// diagonals, with vertices numbered row-major by `(y, x)`. Otherwise the
/// vertices are laid out on a near-equilateral lattice and triangulated
/// incrementally, numbered in insertion order.
pub fn build_mesh(region: Rect, target_edge_length: f64, extension_margin: f64) -> Result<TriangulatedDomain> {
    let finite = [region.x0, region.y0, region.x1, region.y1].iter().all(|v| v.is_finite());
    if !finite || region.width() <= 0.0 || region.height() <= 0.0 {
        return Err(Error::InvalidRegion(format!(
            "rectangle [{}, {}] x [{}, {}] has no area",
            region.x0, region.x1, region.y0, region.y1
        )));
    }
    if !(target_edge_length > 0.0) || !target_edge_length.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "target edge length must be positive, got {target_edge_length}"
        )));
    }
    if !(extension_margin >= 0.0) || !extension_margin.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "extension margin must be nonnegative, got {extension_margin}"
        )));
    }
    let rect = region.expand(extension_margin);
    let divides = |len: f64| {
        let q = len / target_edge_length;
        let n = q.round();
        (n >= 1.0 && (q - n).abs() <= 1e-9 * q.max(1.0)).then_some(n as usize)
    };
    let mut mesh = match (divides(rect.width()), divides(rect.height())) {
        (Some(nx), Some(ny)) => structured_grid(rect, nx, ny),
        _ => lattice_mesh(rect, target_edge_length),
    };
    mesh.extension_margin = extension_margin;
    Ok(mesh)
}

/// Regular `nx × ny` grid over `rect` with alternating cell diagonals.
pub fn structured_grid(rect: Rect, nx: usize, ny: usize) -> TriangulatedDomain {
    assert!(nx >= 1 && ny >= 1);
    let dx = rect.width() / nx as f64;
    let dy = rect.height() / ny as f64;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        let y = if j == ny { rect.y1 } else { rect.y0 + j as f64 * dy };
        for i in 0..=nx {
            let x = if i == nx { rect.x1 } else { rect.x0 + i as f64 * dx };
            vertices.push([x, y]);
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (v00, v10, v01, v11) = (id(i, j), id(i + 1, j), id(i, j + 1), id(i + 1, j + 1));
            if (i + j) % 2 == 0 {
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
            } else {
                triangles.push([v00, v10, v01]);
                triangles.push([v10, v11, v01]);
            }
        }
    }
    let boundary_flags = boundary_vertices(vertices.len(), &triangles);
    TriangulatedDomain {
        vertices,
        triangles,
        boundary_flags,
        extension_margin: 0.0,
    }
}

fn lattice_mesh(rect: Rect, h: f64) -> TriangulatedDomain {
    let nx = ((rect.width() / h).round() as usize).max(1);
    let ny = 2 * ((rect.height() / (h * 3f64.sqrt())).round() as usize).max(1);
    let dx = rect.width() / nx as f64;
    let dy = rect.height() / ny as f64;
    let corners = [[rect.x0, rect.y0], [rect.x1, rect.y0], [rect.x1, rect.y1], [rect.x0, rect.y1]];
    let mut points: Vec<Point> = corners.to_vec();
    for j in 0..=ny {
        let y = if j == ny { rect.y1 } else { rect.y0 + j as f64 * dy };
        if j % 2 == 0 {
            for i in 0..=nx {
                if (j == 0 || j == ny) && (i == 0 || i == nx) {
                    continue;
                }
                let x = if i == nx { rect.x1 } else { rect.x0 + i as f64 * dx };
                points.push([x, y]);
            }
        } else {
            for i in 0..nx {
                points.push([rect.x0 + (i as f64 + 0.5) * dx, y]);
            }
        }
    }
    triangulate_in_rectangle(&points)
}

/// Incremental Delaunay triangulation of points that all lie in the
/// rectangle spanned by the first four points, which must be its corners in
/// counter-clockwise order starting at the lower-left.
pub fn triangulate_in_rectangle(points: &[Point]) -> TriangulatedDomain {
    assert!(points.len() >= 4);
    let mut tris: Vec<Tri> = Vec::new();
    tris.push(Tri::new([0, 1, 2], points));
    tris.push(Tri::new([0, 2, 3], points));
    let extent = (points[2][0] - points[0][0]).abs().max((points[2][1] - points[0][1]).abs());
    let collinear_tol = 1e-12 * extent * extent;

    let mut bad: Vec<usize> = Vec::new();
    let mut edges: HashMap<(usize, usize), ()> = HashMap::new();
    for (pi, &p) in points.iter().enumerate().skip(4) {
        bad.clear();
        for (ti, t) in tris.iter().enumerate() {
            if t.alive && t.circle_contains(p) {
                bad.push(ti);
            }
        }
        edges.clear();
        for &ti in &bad {
            let v = tris[ti].v;
            for k in 0..3 {
                edges.insert((v[k], v[(k + 1) % 3]), ());
            }
        }
        let boundary: Vec<(usize, usize)> = edges
            .keys()
            .filter(|&&(a, b)| !edges.contains_key(&(b, a)))
            .copied()
            .collect();
        for &ti in &bad {
            tris[ti].alive = false;
        }
        for (a, b) in boundary {
            if signed_area(points[a], points[b], p) <= collinear_tol {
                continue;
            }
            tris.push(Tri::new([a, b, pi], points));
        }
        if tris.len() > 4 * points.len() {
            tris.retain(|t| t.alive);
        }
    }
    let triangles: Vec<[usize; 3]> = tris.into_iter().filter(|t| t.alive).map(|t| t.v).collect();
    let boundary_flags = boundary_vertices(points.len(), &triangles);
    TriangulatedDomain {
        vertices: points.to_vec(),
        triangles,
        boundary_flags,
        extension_margin: 0.0,
    }
}

struct Tri {
    v: [usize; 3],
    center: Point,
    r2: f64,
    alive: bool,
}

impl Tri {
    fn new(v: [usize; 3], pts: &[Point]) -> Self {
        let (a, b, c) = (pts[v[0]], pts[v[1]], pts[v[2]]);
        let (bx, by) = (b[0] - a[0], b[1] - a[1]);
        let (cx, cy) = (c[0] - a[0], c[1] - a[1]);
        let d = 2.0 * (bx * cy - by * cx);
        let b2 = bx * bx + by * by;
        let c2 = cx * cx + cy * cy;
        let ux = (cy * b2 - by * c2) / d;
        let uy = (bx * c2 - cx * b2) / d;
        Self {
            v,
            center: [a[0] + ux, a[1] + uy],
            r2: ux * ux + uy * uy,
            alive: true,
        }
    }

    fn circle_contains(&self, p: Point) -> bool {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        dx * dx + dy * dy < self.r2 * (1.0 - 1e-10)
    }
}

fn boundary_vertices(n: usize, triangles: &[[usize; 3]]) -> Vec<bool> {
    let mut count: HashMap<(usize, usize), u32> = HashMap::new();
    for t in triangles {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            *count.entry((a.min(b), a.max(b))).or_default() += 1;
        }
    }
    let mut flags = vec![false; n];
    for ((a, b), c) in count {
        if c == 1 {
            flags[a] = true;
            flags[b] = true;
        }
    }
    flags
}

impl TriangulatedDomain {
    /// Builds a domain from raw vertices and triangles, reorienting clockwise
    /// triangles and validating indices.
    pub fn from_parts(vertices: Vec<Point>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        let mut tris = Vec::with_capacity(triangles.len());
        for (ti, t) in triangles.into_iter().enumerate() {
            if t.iter().any(|&v| v >= n) {
                return Err(Error::Schema(format!("triangle {ti} references a vertex out of range")));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::Schema(format!("triangle {ti} repeats a vertex")));
            }
            let area = signed_area(vertices[t[0]], vertices[t[1]], vertices[t[2]]);
            tris.push(if area < 0.0 { [t[0], t[2], t[1]] } else { t });
        }
        let boundary_flags = boundary_vertices(n, &tris);
        Ok(Self {
            vertices,
            triangles: tris,
            boundary_flags,
            extension_margin: 0.0,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn triangle_points(&self, t: usize) -> [Point; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_points(t);
        signed_area(a, b, c)
    }

    pub fn area(&self) -> f64 {
        (0..self.num_triangles()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn bounding_box(&self) -> Rect {
        let mut r = Rect::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            r.x0 = r.x0.min(v[0]);
            r.y0 = r.y0.min(v[1]);
            r.x1 = r.x1.max(v[0]);
            r.y1 = r.y1.max(v[1]);
        }
        r
    }

    /// Unique undirected edges `(a, b)` with `a < b`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .triangles
            .iter()
            .flat_map(|t| (0..3).map(move |k| (t[k].min(t[(k + 1) % 3]), t[k].max(t[(k + 1) % 3]))))
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    /// Vertex closest to `p`.
    pub fn nearest_vertex(&self, p: Point) -> usize {
        let d2 = |v: &Point| (v[0] - p[0]).powi(2) + (v[1] - p[1]).powi(2);
        (0..self.num_vertices())
            .min_by(|&a, &b| d2(&self.vertices[a]).total_cmp(&d2(&self.vertices[b])))
            .expect("mesh has no vertices")
    }

    fn barycentric(&self, t: usize, p: Point) -> [f64; 3] {
        let [a, b, c] = self.triangle_points(t);
        let area = signed_area(a, b, c);
        [
            signed_area(p, b, c) / area,
            signed_area(a, p, c) / area,
            signed_area(a, b, p) / area,
        ]
    }

    /// Finds the triangle containing `p` and its barycentric weights.
    pub fn locate_point(&self, p: Point) -> Result<BarycentricLocation> {
        let mut best: Option<(usize, [f64; 3], f64)> = None;
        for t in 0..self.num_triangles() {
            let [a, b, c] = self.triangle_points(t);
            let (lo_x, hi_x) = (a[0].min(b[0]).min(c[0]), a[0].max(b[0]).max(c[0]));
            let (lo_y, hi_y) = (a[1].min(b[1]).min(c[1]), a[1].max(b[1]).max(c[1]));
            let slack = 1e-9 * (hi_x - lo_x).max(hi_y - lo_y);
            if p[0] < lo_x - slack || p[0] > hi_x + slack || p[1] < lo_y - slack || p[1] > hi_y + slack {
                continue;
            }
            let w = self.barycentric(t, p);
            let worst = w[0].min(w[1]).min(w[2]);
            if worst >= 0.0 {
                return Ok(BarycentricLocation {
                    triangle_index: t,
                    weights: w,
                });
            }
            if best.is_none_or(|(_, _, m)| worst > m) {
                best = Some((t, w, worst));
            }
        }
        match best {
            Some((t, w, worst)) if worst >= -1e-9 => {
                let mut w = w.map(|x| x.max(0.0));
                let s: f64 = w.iter().sum();
                w.iter_mut().for_each(|x| *x /= s);
                Ok(BarycentricLocation {
                    triangle_index: t,
                    weights: w,
                })
            }
            _ => Err(Error::OutOfDomain { x: p[0], y: p[1] }),
        }
    }

    /// Reconstructs the point described by a barycentric location.
    pub fn interpolate_location(&self, loc: &BarycentricLocation) -> Point {
        let pts = self.triangle_points(loc.triangle_index);
        let mut out = [0.0; 2];
        for (w, q) in loc.weights.iter().zip(pts) {
            out[0] += w * q[0];
            out[1] += w * q[1];
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&MeshFile {
            vertices: self.vertices.clone(),
            triangles: self.triangles.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: MeshFile = serde_json::from_str(s)?;
        Self::from_parts(f.vertices, f.triangles)
    }

    /// Relabels vertices so that old vertex `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.num_vertices());
        let mut vertices = vec![[0.0; 2]; perm.len()];
        let mut boundary_flags = vec![false; perm.len()];
        for (old, &new) in perm.iter().enumerate() {
            vertices[new] = self.vertices[old];
            boundary_flags[new] = self.boundary_flags[old];
        }
        Self {
            vertices,
            triangles: self.triangles.iter().map(|t| t.map(|v| perm[v])).collect(),
            boundary_flags,
            extension_margin: self.extension_margin,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_square_coarse_is_two_triangles() {
        let m = build_mesh(Rect::unit(), 1.0, 0.0).unwrap();
        assert_eq!(m.num_vertices(), 4);
        assert_eq!(m.num_triangles(), 2);
        assert!((m.area() - 1.0).abs() < 1e-14);
        assert!(m.boundary_flags.iter().all(|&b| b));
    }

    #[test]
    fn structured_vertices_are_row_major() {
        let m = build_mesh(Rect::unit(), 0.5, 0.0).unwrap();
        assert_eq!(m.vertices[1], [0.5, 0.0]);
        assert_eq!(m.vertices[3], [0.0, 0.5]);
        assert!(!m.boundary_flags[4]);
    }

    #[test]
    fn degenerate_rectangle_rejected() {
        let r = Rect::new(0.0, 0.0, 0.0, 1.0);
        assert!(matches!(build_mesh(r, 0.1, 0.0), Err(Error::InvalidRegion(_))));
        assert!(build_mesh(Rect::unit(), 0.0, 0.0).is_err());
        assert!(build_mesh(Rect::unit(), 0.1, -1.0).is_err());
    }

    #[test]
    fn margin_extends_the_region() {
        let m = build_mesh(Rect::unit(), 0.25, 0.5).unwrap();
        let bb = m.bounding_box();
        assert_eq!((bb.x0, bb.y0, bb.x1, bb.y1), (-0.5, -0.5, 1.5, 1.5));
        assert!((m.area() - 4.0).abs() < 1e-12);
        assert_eq!(m.extension_margin, 0.5);
    }

    #[test]
    fn lattice_mesh_tiles_rectangle() {
        let r = Rect::new(0.0, 0.0, 1.3, 0.7);
        let m = build_mesh(r, 0.17, 0.0).unwrap();
        assert!((m.area() - r.area()).abs() < 1e-10 * r.area());
        for t in 0..m.num_triangles() {
            assert!(m.triangle_area(t) > 0.0);
        }
    }

    #[test]
    fn locate_vertex_and_centroid() {
        let m = build_mesh(Rect::unit(), 0.25, 0.0).unwrap();
        let loc = m.locate_point(m.vertices[6]).unwrap();
        let mut w = loc.weights;
        w.sort_by(f64::total_cmp);
        assert_eq!(w, [0.0, 0.0, 1.0]);
        let [a, b, c] = m.triangle_points(3);
        let centroid = [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0];
        let loc = m.locate_point(centroid).unwrap();
        assert_eq!(loc.triangle_index, 3);
        for w in loc.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!(matches!(m.locate_point([1.5, 0.5]), Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn json_round_trip_and_orientation_fix() {
        let m = build_mesh(Rect::unit(), 0.5, 0.0).unwrap();
        let back = TriangulatedDomain::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.vertices, m.vertices);
        assert_eq!(back.triangles, m.triangles);
        let cw = r#"{"vertices": [[0,0],[1,0],[0,1]], "triangles": [[0,2,1]]}"#;
        let d = TriangulatedDomain::from_json(cw).unwrap();
        assert!(d.triangle_area(0) > 0.0);
        let bad = r#"{"vertices": [[0,0],[1,0],[0,1]], "triangles": [[0,1,3]]}"#;
        assert!(TriangulatedDomain::from_json(bad).is_err());
    }
}
