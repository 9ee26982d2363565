//! The broken polynomial space on a mesh, with the geometric and basis tables
//! every form evaluation needs precomputed once.

use std::sync::{Arc, OnceLock};

use rayon::prelude::*;

use crate::basis::{make_basis, ReferenceBasis, Tabulation};
use crate::error::Result;
use crate::mesh::{CellType, MeshTopology};
use crate::quadrature::{make_face_quadrature, make_quadrature, QuadratureRule};

/// Which reference points the limiter and the extrema diagnostics look at.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSet {
    /// Volume quadrature points plus the face quadrature points of every edge.
    #[default]
    Quadrature,
    /// Cell boundary only: face quadrature points plus the vertices.
    Boundary,
}

/// Reference points and basis values used for pointwise sampling.
#[derive(Clone, Debug)]
pub struct SampleTable {
    pub points: Vec<[f64; 2]>,
    pub tab: Tabulation,
}

impl SampleTable {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Precomputed quantities for one interior face. Local dof `a < n` belongs to
/// the minus cell, `a >= n` to the plus cell.
#[derive(Clone, Debug)]
pub struct FaceData {
    pub face: usize,
    pub minus: usize,
    pub plus: usize,
    pub h_e: f64,
    pub normal: [f64; 2],
    /// Physical quadrature points and weights (including `|e|`).
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    /// Basis values on the minus/plus side, point-major.
    pub minus_vals: Vec<f64>,
    pub plus_vals: Vec<f64>,
    /// Normal derivatives `grad(phi_j) . n` on each side, point-major.
    pub minus_dn: Vec<f64>,
    pub plus_dn: Vec<f64>,
    /// `(1/h_e) int [phi_a][phi_b]`, `2n x 2n` row-major.
    pub penalty: Vec<f64>,
    /// `int {grad phi_b . n}[phi_a] + {grad phi_a . n}[phi_b]`, `2n x 2n` row-major.
    pub consistency: Vec<f64>,
}

impl FaceData {
    /// Local SIP face matrix `eta * penalty - consistency`.
    pub fn sip_matrix(&self, eta: f64) -> Vec<f64> {
        self.penalty
            .iter()
            .zip(&self.consistency)
            .map(|(p, c)| eta * p - c)
            .collect()
    }
}

/// `V_h^p` on a mesh.
#[derive(Debug)]
pub struct DgSpace {
    pub mesh: Arc<MeshTopology>,
    pub basis: ReferenceBasis,
    /// Volume rule of exactness `max(4p, 2p + 2)`.
    pub volume_rule: QuadratureRule,
    pub volume_tab: Tabulation,
    /// Richer rule used for analytic data (projections, sources, errors).
    pub data_rule: QuadratureRule,
    pub data_tab: Tabulation,
    /// Reference face rule of exactness `2p + 2`.
    pub face_rule: QuadratureRule,
    pub faces: Vec<FaceData>,
    /// Per-cell stiffness `int_K grad phi_i . grad phi_j`, `n x n` row-major.
    pub stiffness: Vec<f64>,
    samples_quadrature: SampleTable,
    samples_boundary: SampleTable,
    p0: OnceLock<Arc<DgSpace>>,
}

impl DgSpace {
    pub fn new(mesh: Arc<MeshTopology>, p: usize) -> Result<Arc<Self>> {
        let cell_type = mesh.cell_type();
        let basis = make_basis(cell_type, p)?;
        let n = basis.num_dofs();
        let volume_rule = make_quadrature(cell_type, (4 * p).max(2 * p + 2))?;
        let volume_tab = basis.tabulate(&volume_rule.points);
        let data_rule = make_quadrature(cell_type, (4 * p).max(2 * p + 2) + 6)?;
        let data_tab = basis.tabulate(&data_rule.points);
        let face_rule = make_face_quadrature(2 * p + 2)?;

        let stiffness: Vec<f64> = mesh
            .cells
            .par_iter()
            .flat_map_iter(|cell| {
                let mut s = vec![0.0; n * n];
                for (q, w) in volume_rule.weights.iter().enumerate() {
                    let wq = w * cell.map.det.abs();
                    let g: Vec<[f64; 2]> = volume_tab
                        .grads(q)
                        .iter()
                        .map(|g| cell.map.push_gradient(*g))
                        .collect();
                    for i in 0..n {
                        for j in 0..n {
                            s[i * n + j] += wq * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
                        }
                    }
                }
                s
            })
            .collect();

        let interior: Vec<usize> = mesh.interior_faces().map(|(f, _)| f).collect();
        let faces: Vec<FaceData> = interior
            .par_iter()
            .map(|&f| build_face(&mesh, &basis, &face_rule, f))
            .collect();

        let samples_quadrature = sample_table(&basis, &volume_rule, &face_rule, SampleSet::Quadrature);
        let samples_boundary = sample_table(&basis, &volume_rule, &face_rule, SampleSet::Boundary);

        Ok(Arc::new(DgSpace {
            mesh,
            basis,
            volume_rule,
            volume_tab,
            data_rule,
            data_tab,
            face_rule,
            faces,
            stiffness,
            samples_quadrature,
            samples_boundary,
            p0: OnceLock::new(),
        }))
    }

    pub fn order(&self) -> usize {
        self.basis.order
    }

    pub fn num_dofs(&self) -> usize {
        self.basis.num_dofs()
    }

    pub fn num_cells(&self) -> usize {
        self.mesh.num_cells()
    }

    pub fn cell_type(&self) -> CellType {
        self.mesh.cell_type()
    }

    pub fn measure(&self, cell: usize) -> f64 {
        self.mesh.cells[cell].measure
    }

    pub fn total_measure(&self) -> f64 {
        self.mesh.total_measure()
    }

    pub fn cell_stiffness(&self, cell: usize) -> &[f64] {
        let n = self.num_dofs();
        &self.stiffness[cell * n * n..(cell + 1) * n * n]
    }

    pub fn samples(&self, set: SampleSet) -> &SampleTable {
        match set {
            SampleSet::Quadrature => &self.samples_quadrature,
            SampleSet::Boundary => &self.samples_boundary,
        }
    }

    /// Trace-inequality constant `C_T = p (p + d - 1) / d` with `d = 2`.
    pub fn trace_constant(&self) -> f64 {
        let p = self.order() as f64;
        p * (p + 1.0) / 2.0
    }

    /// `max_K m_K C_T`, the smallest penalty covered by the coercivity estimate.
    /// For `p = 0` any positive value is coercive; 1 is the consistent
    /// two-point flux.
    pub fn auto_penalty(&self) -> f64 {
        let m = self.mesh.cell_face_counts.iter().copied().max().unwrap_or(0) as f64;
        (m * self.trace_constant()).max(1.0)
    }

    /// The piecewise-constant space on the same mesh.
    pub fn p0_space(self: &Arc<Self>) -> Arc<DgSpace> {
        if self.order() == 0 {
            return Arc::clone(self);
        }
        Arc::clone(self.p0.get_or_init(|| {
            DgSpace::new(Arc::clone(&self.mesh), 0).expect("order-0 space is always constructible")
        }))
    }

    pub fn same_as(self: &Arc<Self>, other: &Arc<DgSpace>) -> bool {
        Arc::ptr_eq(self, other)
    }
}

fn build_face(mesh: &MeshTopology, basis: &ReferenceBasis, rule: &QuadratureRule, f: usize) -> FaceData {
    let face = &mesh.faces[f];
    let minus = face.minus_cell;
    let plus = face.plus_cell.expect("interior face");
    let n = basis.num_dofs();
    let nq = rule.len();
    let cm = &mesh.cells[minus];
    let cp = &mesh.cells[plus];
    let normal = face.unit_normal;

    let mut points = Vec::with_capacity(nq);
    let mut weights = Vec::with_capacity(nq);
    let mut minus_vals = Vec::with_capacity(nq * n);
    let mut plus_vals = Vec::with_capacity(nq * n);
    let mut minus_dn = Vec::with_capacity(nq * n);
    let mut plus_dn = Vec::with_capacity(nq * n);
    for (t, w) in rule.points.iter().zip(&rule.weights) {
        let x = mesh.face_point(face, t[0]);
        points.push(x);
        weights.push(w * face.length);
        for (cell, vals, dn) in [(cm, &mut minus_vals, &mut minus_dn), (cp, &mut plus_vals, &mut plus_dn)] {
            let xi = cell.map.to_reference(x);
            vals.extend(basis.values(xi));
            dn.extend(basis.ref_gradients(xi).into_iter().map(|g| {
                let g = cell.map.push_gradient(g);
                g[0] * normal[0] + g[1] * normal[1]
            }));
        }
    }

    let m = 2 * n;
    let mut penalty = vec![0.0; m * m];
    let mut consistency = vec![0.0; m * m];
    // jump(phi_a) = s_a phi_a, avg(dn phi_a) = dn_a / 2
    let side = |a: usize, q: usize| -> (f64, f64) {
        if a < n {
            (minus_vals[q * n + a], minus_dn[q * n + a])
        } else {
            (-plus_vals[q * n + a - n], plus_dn[q * n + a - n])
        }
    };
    for q in 0..nq {
        let w = weights[q];
        for a in 0..m {
            let (ja, da) = side(a, q);
            for b in 0..m {
                let (jb, db) = side(b, q);
                penalty[a * m + b] += w * ja * jb / face.h_e;
                consistency[a * m + b] += w * 0.5 * (db * ja + da * jb);
            }
        }
    }

    FaceData {
        face: f,
        minus,
        plus,
        h_e: face.h_e,
        normal,
        points,
        weights,
        minus_vals,
        plus_vals,
        minus_dn,
        plus_dn,
        penalty,
        consistency,
    }
}

fn sample_table(
    basis: &ReferenceBasis,
    volume: &QuadratureRule,
    face: &QuadratureRule,
    set: SampleSet,
) -> SampleTable {
    let verts = basis.cell_type.reference_vertices();
    let mut points = Vec::new();
    if set == SampleSet::Quadrature {
        points.extend_from_slice(&volume.points);
    } else {
        points.extend_from_slice(verts);
    }
    for l in 0..verts.len() {
        let a = verts[l];
        let b = verts[(l + 1) % verts.len()];
        for t in &face.points {
            points.push([a[0] + t[0] * (b[0] - a[0]), a[1] + t[0] * (b[1] - a[1])]);
        }
    }
    let tab = basis.tabulate(&points);
    SampleTable { points, tab }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_quad_mesh, build_tri_mesh, Rect};

    #[test]
    fn auto_penalty_matches_face_counts() {
        let quad = DgSpace::new(Arc::new(build_quad_mesh(4, 4, Rect::unit()).unwrap()), 1).unwrap();
        assert_eq!(quad.trace_constant(), 1.0);
        assert_eq!(quad.auto_penalty(), 4.0);
        let tri = DgSpace::new(Arc::new(build_tri_mesh(4, 4, Rect::unit()).unwrap()), 2).unwrap();
        assert_eq!(tri.trace_constant(), 3.0);
        assert_eq!(tri.auto_penalty(), 9.0);
    }

    #[test]
    fn face_matrices_are_symmetric() {
        let space = DgSpace::new(Arc::new(build_tri_mesh(3, 3, Rect::unit()).unwrap()), 2).unwrap();
        let m = 2 * space.num_dofs();
        for fd in &space.faces {
            for a in 0..m {
                for b in 0..m {
                    assert!((fd.penalty[a * m + b] - fd.penalty[b * m + a]).abs() < 1e-12);
                    assert!((fd.consistency[a * m + b] - fd.consistency[b * m + a]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn stiffness_annihilates_constants() {
        let space = DgSpace::new(Arc::new(build_quad_mesh(3, 2, Rect::unit()).unwrap()), 2).unwrap();
        let n = space.num_dofs();
        for k in 0..space.num_cells() {
            let s = space.cell_stiffness(k);
            for j in 0..n {
                assert_eq!(s[j], 0.0);
                assert_eq!(s[j * n], 0.0);
            }
        }
    }

    #[test]
    fn sample_sets_lie_in_reference_element() {
        for ct in [CellType::Quad, CellType::Tri] {
            let mesh = match ct {
                CellType::Quad => build_quad_mesh(1, 1, Rect::unit()).unwrap(),
                CellType::Tri => build_tri_mesh(1, 1, Rect::unit()).unwrap(),
            };
            let space = DgSpace::new(Arc::new(mesh), 1).unwrap();
            for set in [SampleSet::Quadrature, SampleSet::Boundary] {
                let s = space.samples(set);
                assert!(!s.is_empty());
                assert!(s.points.iter().all(|x| ct.contains_reference(*x)));
            }
        }
    }
}
