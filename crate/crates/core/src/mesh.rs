//! Structured 2D meshes of affine cells with interior/boundary face topology.
//!
//! Faces carry a unit normal pointing from the minus cell into the plus cell,
//! and jumps everywhere in the crate are `minus trace - plus trace`.

use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellType {
    Quad,
    Tri,
}

impl CellType {
    /// Measure of the reference element (unit square or unit right triangle).
    pub fn reference_measure(self) -> f64 {
        match self {
            CellType::Quad => 1.0,
            CellType::Tri => 0.5,
        }
    }

    pub fn num_vertices(self) -> usize {
        match self {
            CellType::Quad => 4,
            CellType::Tri => 3,
        }
    }

    /// Reference-element vertices in counter-clockwise order.
    pub fn reference_vertices(self) -> &'static [[f64; 2]] {
        match self {
            CellType::Quad => &[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            CellType::Tri => &[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        }
    }

    pub fn contains_reference(self, x: [f64; 2]) -> bool {
        let eps = 1e-12;
        match self {
            CellType::Quad => (-eps..=1.0 + eps).contains(&x[0]) && (-eps..=1.0 + eps).contains(&x[1]),
            CellType::Tri => x[0] >= -eps && x[1] >= -eps && x[0] + x[1] <= 1.0 + eps,
        }
    }
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Rect { x0, x1, y0, y1 }
    }

    pub fn unit() -> Self {
        Rect::new(0.0, 1.0, 0.0, 1.0)
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Affine map `x = origin + jac * xi` from reference to physical coordinates.
#[derive(Clone, Copy, Debug)]
pub struct AffineMap {
    pub origin: [f64; 2],
    /// Row-major Jacobian `[[dx/dxi, dx/deta], [dy/dxi, dy/deta]]`.
    pub jac: [[f64; 2]; 2],
    pub det: f64,
    /// Inverse Jacobian, row-major.
    pub inv: [[f64; 2]; 2],
}

impl AffineMap {
    fn new(origin: [f64; 2], e1: [f64; 2], e2: [f64; 2]) -> Self {
        let jac = [[e1[0], e2[0]], [e1[1], e2[1]]];
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        let inv = [
            [jac[1][1] / det, -jac[0][1] / det],
            [-jac[1][0] / det, jac[0][0] / det],
        ];
        AffineMap {
            origin,
            jac,
            det,
            inv,
        }
    }

    pub fn to_physical(&self, xi: [f64; 2]) -> [f64; 2] {
        [
            self.origin[0] + self.jac[0][0] * xi[0] + self.jac[0][1] * xi[1],
            self.origin[1] + self.jac[1][0] * xi[0] + self.jac[1][1] * xi[1],
        ]
    }

    pub fn to_reference(&self, x: [f64; 2]) -> [f64; 2] {
        let d = [x[0] - self.origin[0], x[1] - self.origin[1]];
        [
            self.inv[0][0] * d[0] + self.inv[0][1] * d[1],
            self.inv[1][0] * d[0] + self.inv[1][1] * d[1],
        ]
    }

    /// Physical gradient from a reference gradient: `J^{-T} g`.
    pub fn push_gradient(&self, g: [f64; 2]) -> [f64; 2] {
        [
            self.inv[0][0] * g[0] + self.inv[1][0] * g[1],
            self.inv[0][1] * g[0] + self.inv[1][1] * g[1],
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub cell_type: CellType,
    /// Vertex indices in counter-clockwise order.
    pub vertices: Vec<usize>,
    pub measure: f64,
    pub map: AffineMap,
}

impl Cell {
    pub fn centroid(&self, vertices: &[[f64; 2]]) -> [f64; 2] {
        let n = self.vertices.len() as f64;
        let mut c = [0.0, 0.0];
        for &v in &self.vertices {
            c[0] += vertices[v][0];
            c[1] += vertices[v][1];
        }
        [c[0] / n, c[1] / n]
    }
}

#[derive(Clone, Debug)]
pub struct Face {
    pub minus_cell: usize,
    /// `None` on the domain boundary.
    pub plus_cell: Option<usize>,
    /// Endpoint vertex indices, ordered counter-clockwise with respect to the minus cell.
    pub vertices: [usize; 2],
    pub length: f64,
    /// Unit normal pointing out of the minus cell.
    pub unit_normal: [f64; 2],
    /// Harmonic face width; `|K-| / |e|` on boundary faces.
    pub h_e: f64,
}

impl Face {
    pub fn is_boundary(&self) -> bool {
        self.plus_cell.is_none()
    }
}

/// Cells, vertices and faces of a conforming 2D mesh.
#[derive(Clone, Debug)]
pub struct MeshTopology {
    pub vertices: Vec<[f64; 2]>,
    pub cells: Vec<Cell>,
    pub faces: Vec<Face>,
    /// Number of interior faces of each cell.
    pub cell_face_counts: Vec<usize>,
    /// Interior face indices adjacent to each cell.
    pub cell_faces: Vec<Vec<usize>>,
    cell_type: CellType,
}

fn validate(nx: usize, ny: usize, domain: &Rect) -> Result<()> {
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidArgument(format!(
            "mesh resolution must be positive, got {nx} x {ny}"
        )));
    }
    let ok = |v: f64| v.is_finite();
    if !(ok(domain.x0) && ok(domain.x1) && ok(domain.y0) && ok(domain.y1))
        || domain.x1 <= domain.x0
        || domain.y1 <= domain.y0
    {
        return Err(Error::InvalidArgument(format!(
            "degenerate domain {domain:?}"
        )));
    }
    Ok(())
}

fn grid_vertices(nx: usize, ny: usize, domain: &Rect) -> Vec<[f64; 2]> {
    let dx = (domain.x1 - domain.x0) / nx as f64;
    let dy = (domain.y1 - domain.y0) / ny as f64;
    let mut v = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            let x = if i == nx { domain.x1 } else { domain.x0 + i as f64 * dx };
            let y = if j == ny { domain.y1 } else { domain.y0 + j as f64 * dy };
            v.push([x, y]);
        }
    }
    v
}

/// `nx * ny` axis-aligned quadrilaterals.
pub fn build_quad_mesh(nx: usize, ny: usize, domain: Rect) -> Result<MeshTopology> {
    validate(nx, ny, &domain)?;
    let vertices = grid_vertices(nx, ny, &domain);
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut cells = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            cells.push(vec![id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    Ok(MeshTopology::from_cells(vertices, cells, CellType::Quad))
}

/// Each grid quad split along its lower-left to upper-right diagonal.
pub fn build_tri_mesh(nx: usize, ny: usize, domain: Rect) -> Result<MeshTopology> {
    validate(nx, ny, &domain)?;
    let vertices = grid_vertices(nx, ny, &domain);
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut cells = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            // Right angles sit at b and d respectively.
            cells.push(vec![b, c, a]);
            cells.push(vec![d, a, c]);
        }
    }
    Ok(MeshTopology::from_cells(vertices, cells, CellType::Tri))
}

impl MeshTopology {
    fn from_cells(vertices: Vec<[f64; 2]>, cell_vertices: Vec<Vec<usize>>, cell_type: CellType) -> Self {
        let cells: Vec<Cell> = cell_vertices
            .into_iter()
            .map(|vs| {
                let p0 = vertices[vs[0]];
                let p1 = vertices[vs[1]];
                let p_last = vertices[*vs.last().unwrap()];
                let e1 = [p1[0] - p0[0], p1[1] - p0[1]];
                let e2 = [p_last[0] - p0[0], p_last[1] - p0[1]];
                let map = AffineMap::new(p0, e1, e2);
                let measure = map.det.abs() * cell_type.reference_measure();
                Cell {
                    cell_type,
                    vertices: vs,
                    measure,
                    map,
                }
            })
            .collect();

        let mut faces: Vec<Face> = Vec::new();
        let mut lookup: HashMap<(usize, usize), usize> = HashMap::new();
        for (k, cell) in cells.iter().enumerate() {
            let n = cell.vertices.len();
            for l in 0..n {
                let a = cell.vertices[l];
                let b = cell.vertices[(l + 1) % n];
                let key = (a.min(b), a.max(b));
                if let Some(&f) = lookup.get(&key) {
                    faces[f].plus_cell = Some(k);
                } else {
                    let pa = vertices[a];
                    let pb = vertices[b];
                    let d = [pb[0] - pa[0], pb[1] - pa[1]];
                    let length = d[0].hypot(d[1]);
                    lookup.insert(key, faces.len());
                    faces.push(Face {
                        minus_cell: k,
                        plus_cell: None,
                        vertices: [a, b],
                        length,
                        unit_normal: [d[1] / length, -d[0] / length],
                        h_e: 0.0,
                    });
                }
            }
        }

        let mut cell_face_counts = vec![0; cells.len()];
        let mut cell_faces = vec![Vec::new(); cells.len()];
        for (f, face) in faces.iter_mut().enumerate() {
            let km = cells[face.minus_cell].measure;
            match face.plus_cell {
                Some(p) => {
                    let kp = cells[p].measure;
                    face.h_e = 2.0 * kp * km / (face.length * (km + kp));
                    cell_face_counts[face.minus_cell] += 1;
                    cell_face_counts[p] += 1;
                    cell_faces[face.minus_cell].push(f);
                    cell_faces[p].push(f);
                }
                None => face.h_e = km / face.length,
            }
        }

        MeshTopology {
            vertices,
            cells,
            faces,
            cell_face_counts,
            cell_faces,
            cell_type,
        }
    }

    pub fn cell_type(&self) -> CellType {
        self.cell_type
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn interior_faces(&self) -> impl Iterator<Item = (usize, &Face)> {
        self.faces.iter().enumerate().filter(|(_, f)| !f.is_boundary())
    }

    pub fn num_interior_faces(&self) -> usize {
        self.faces.iter().filter(|f| !f.is_boundary()).count()
    }

    pub fn num_boundary_faces(&self) -> usize {
        self.faces.len() - self.num_interior_faces()
    }

    pub fn total_measure(&self) -> f64 {
        self.cells.iter().map(|c| c.measure).sum()
    }

    /// Largest face width `h_e` over all faces.
    pub fn global_mesh_width(&self) -> f64 {
        self.faces.iter().map(|f| f.h_e).fold(0.0, f64::max)
    }

    pub fn face_point(&self, face: &Face, t: f64) -> [f64; 2] {
        let a = self.vertices[face.vertices[0]];
        let b = self.vertices[face.vertices[1]];
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    }

    pub fn centroid(&self, cell: usize) -> [f64; 2] {
        self.cells[cell].centroid(&self.vertices)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_quad() {
        let m = build_quad_mesh(1, 1, Rect::unit()).unwrap();
        assert_eq!(m.num_cells(), 1);
        assert_eq!(m.num_interior_faces(), 0);
        assert_eq!(m.num_boundary_faces(), 4);
    }

    #[test]
    fn two_by_two_quads() {
        let m = build_quad_mesh(2, 2, Rect::unit()).unwrap();
        assert_eq!(m.num_cells(), 4);
        assert_eq!(m.num_interior_faces(), 4);
        assert_eq!(m.num_boundary_faces(), 8);
        let h = m.faces[0].h_e;
        assert!(m.faces.iter().all(|f| (f.h_e - h).abs() < 1e-15));
        assert!((m.global_mesh_width() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unit_square_neighbours_have_unit_width() {
        let m = build_quad_mesh(2, 1, Rect::new(0.0, 2.0, 0.0, 1.0)).unwrap();
        let (_, f) = m.interior_faces().next().unwrap();
        assert!((f.h_e - 1.0).abs() < 1e-15);
    }

    #[test]
    fn split_square() {
        let m = build_tri_mesh(1, 1, Rect::unit()).unwrap();
        assert_eq!(m.num_cells(), 2);
        assert_eq!(m.num_interior_faces(), 1);
        let (_, f) = m.interior_faces().next().unwrap();
        assert!((f.length - 2f64.sqrt()).abs() < 1e-15);
        assert!((f.h_e - 1.0 / (2.0 * 2f64.sqrt())).abs() < 1e-15);
        for c in &m.cells {
            assert!((c.measure - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn fine_triangulation_area() {
        let m = build_tri_mesh(64, 64, Rect::unit()).unwrap();
        assert_eq!(m.num_cells(), 2 * 64 * 64);
        assert!((m.total_measure() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_zero_resolution() {
        assert!(matches!(
            build_quad_mesh(0, 3, Rect::unit()),
            Err(Error::InvalidArgument(_))
        ));
        assert!(build_tri_mesh(2, 0, Rect::unit()).is_err());
        assert!(build_quad_mesh(2, 2, Rect::new(0.0, 0.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn refinement_halves_width() {
        for tri in [false, true] {
            let build = |n| {
                if tri {
                    build_tri_mesh(n, n, Rect::unit()).unwrap()
                } else {
                    build_quad_mesh(n, n, Rect::unit()).unwrap()
                }
            };
            let coarse = build(5);
            let fine = build(10);
            assert!((coarse.global_mesh_width() - 2.0 * fine.global_mesh_width()).abs() < 1e-12);
            assert_eq!(fine.num_cells(), 4 * coarse.num_cells());
            assert!((fine.total_measure() - coarse.total_measure()).abs() < 1e-12);
            let w = fine.global_mesh_width();
            assert!(fine.faces.iter().all(|f| f.h_e <= w));
        }
    }

    #[test]
    fn face_topology_invariants() {
        for m in [
            build_quad_mesh(4, 3, Rect::new(-1.0, 2.0, 0.0, 0.5)).unwrap(),
            build_tri_mesh(3, 5, Rect::unit()).unwrap(),
        ] {
            let mut counts = vec![0usize; m.num_cells()];
            for f in &m.faces {
                let n = f.unit_normal;
                assert!(((n[0] * n[0] + n[1] * n[1]).sqrt() - 1.0).abs() < 1e-14);
                assert!(f.h_e > 0.0);
                if let Some(p) = f.plus_cell {
                    assert_ne!(p, f.minus_cell);
                    counts[f.minus_cell] += 1;
                    counts[p] += 1;
                    let cm = m.centroid(f.minus_cell);
                    let cp = m.centroid(p);
                    assert!((cp[0] - cm[0]) * n[0] + (cp[1] - cm[1]) * n[1] > 0.0);
                    let km = m.cells[f.minus_cell].measure;
                    let kp = m.cells[p].measure;
                    let expected = 2.0 * km * kp / (f.length * (km + kp));
                    assert!((f.h_e - expected).abs() < 1e-15);
                }
            }
            assert_eq!(counts, m.cell_face_counts);
            for c in &m.cells {
                assert!(c.map.det > 0.0, "cells must be counter-clockwise");
            }
        }
    }

    #[test]
    fn affine_maps_hit_vertices() {
        let m = build_tri_mesh(2, 2, Rect::unit()).unwrap();
        for c in &m.cells {
            for (l, r) in c.cell_type.reference_vertices().iter().enumerate() {
                let x = c.map.to_physical(*r);
                let v = m.vertices[c.vertices[l]];
                assert!((x[0] - v[0]).abs() < 1e-15 && (x[1] - v[1]).abs() < 1e-15);
                let back = c.map.to_reference(x);
                assert!((back[0] - r[0]).abs() < 1e-14 && (back[1] - r[1]).abs() < 1e-14);
            }
        }
    }
}
