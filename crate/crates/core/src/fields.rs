//! Broken polynomial functions stored as per-cell modal coefficients.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::space::{DgSpace, SampleSet};

/// A member of `V_h^p`: `num_cells x n_p` coefficients, contiguous per cell.
#[derive(Clone, Debug)]
pub struct DiscreteField {
    space: Arc<DgSpace>,
    coeffs: Vec<f64>,
}

impl DiscreteField {
    pub fn zeros(space: &Arc<DgSpace>) -> Self {
        DiscreteField {
            space: Arc::clone(space),
            coeffs: vec![0.0; space.num_cells() * space.num_dofs()],
        }
    }

    pub fn constant(space: &Arc<DgSpace>, value: f64) -> Self {
        let mut f = DiscreteField::zeros(space);
        let n = space.num_dofs();
        for k in 0..space.num_cells() {
            f.coeffs[k * n] = value;
        }
        f
    }

    pub fn from_coeffs(space: &Arc<DgSpace>, coeffs: Vec<f64>) -> Result<Self> {
        let expected = space.num_cells() * space.num_dofs();
        if coeffs.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "expected {expected} coefficients, got {}",
                coeffs.len()
            )));
        }
        Ok(DiscreteField {
            space: Arc::clone(space),
            coeffs,
        })
    }

    /// Piecewise constant field from one value per cell.
    pub fn from_cell_values(space: &Arc<DgSpace>, values: &[f64]) -> Result<Self> {
        if values.len() != space.num_cells() {
            return Err(Error::InvalidArgument(format!(
                "expected {} cell values, got {}",
                space.num_cells(),
                values.len()
            )));
        }
        let mut f = DiscreteField::zeros(space);
        let n = space.num_dofs();
        for (k, v) in values.iter().enumerate() {
            f.coeffs[k * n] = *v;
        }
        Ok(f)
    }

    pub fn space(&self) -> &Arc<DgSpace> {
        &self.space
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn cell(&self, k: usize) -> &[f64] {
        let n = self.space.num_dofs();
        &self.coeffs[k * n..(k + 1) * n]
    }

    pub fn cell_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.space.num_dofs();
        &mut self.coeffs[k * n..(k + 1) * n]
    }

    pub fn same_space(&self, other: &DiscreteField) -> bool {
        Arc::ptr_eq(&self.space, &other.space)
    }

    pub fn check_same_space(&self, other: &DiscreteField) -> Result<()> {
        if self.same_space(other) {
            Ok(())
        } else {
            Err(Error::SpaceMismatch)
        }
    }

    /// `|K|^{-1} int_K field`, which is the first modal coefficient.
    pub fn cell_average(&self, k: usize) -> Result<f64> {
        if k >= self.space.num_cells() {
            return Err(Error::CellOutOfRange {
                index: k,
                len: self.space.num_cells(),
            });
        }
        Ok(self.coeffs[k * self.space.num_dofs()])
    }

    pub fn cell_averages(&self) -> Vec<f64> {
        let n = self.space.num_dofs();
        self.coeffs.iter().step_by(n).copied().collect()
    }

    /// Cell-average projection onto the piecewise constants of the same mesh.
    pub fn project_p0(&self) -> DiscreteField {
        let p0 = self.space.p0_space();
        DiscreteField {
            space: p0,
            coeffs: self.cell_averages(),
        }
    }

    /// Value at a reference point of cell `k`.
    pub fn evaluate(&self, k: usize, xi: [f64; 2]) -> f64 {
        let b = &self.space.basis;
        self.cell(k)
            .iter()
            .enumerate()
            .map(|(j, c)| c * b.value(j, xi))
            .sum()
    }

    /// Physical gradient at a reference point of cell `k`.
    pub fn gradient(&self, k: usize, xi: [f64; 2]) -> [f64; 2] {
        let b = &self.space.basis;
        let map = &self.space.mesh.cells[k].map;
        let mut g = [0.0, 0.0];
        for (j, c) in self.cell(k).iter().enumerate() {
            let gj = map.push_gradient(b.ref_gradient(j, xi));
            g[0] += c * gj[0];
            g[1] += c * gj[1];
        }
        g
    }

    /// Values of cell `k` at the sample points of `set`.
    pub fn sample_values(&self, k: usize, set: SampleSet) -> Vec<f64> {
        let table = self.space.samples(set);
        let c = self.cell(k);
        (0..table.len()).map(|q| table.tab.eval(q, c)).collect()
    }

    /// Minimum and maximum over all sample points of all cells.
    pub fn sample_extrema(&self, set: SampleSet) -> (f64, f64) {
        let table = self.space.samples(set);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for k in 0..self.space.num_cells() {
            let c = self.cell(k);
            for q in 0..table.len() {
                let v = table.tab.eval(q, c);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        (lo, hi)
    }

    /// Minimum and maximum of the cell averages.
    pub fn average_extrema(&self) -> (f64, f64) {
        self.cell_averages()
            .into_iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    }

    /// `|Omega|^{-1} int field`.
    pub fn mass(&self) -> f64 {
        let n = self.space.num_dofs();
        let mut total = 0.0;
        let mut measure = 0.0;
        for (k, cell) in self.space.mesh.cells.iter().enumerate() {
            total += cell.measure * self.coeffs[k * n];
            measure += cell.measure;
        }
        total / measure
    }

    /// `int_K field^2 = |K| sum_j c_j^2`.
    pub fn cell_l2_squared(&self, k: usize) -> f64 {
        self.space.measure(k) * self.cell(k).iter().map(|c| c * c).sum::<f64>()
    }

    pub fn l2_norm(&self) -> f64 {
        (0..self.space.num_cells())
            .map(|k| self.cell_l2_squared(k))
            .sum::<f64>()
            .sqrt()
    }
}

/// L2 projection of an analytic function evaluated at physical points.
pub fn project_l2(space: &Arc<DgSpace>, f: impl Fn([f64; 2]) -> f64) -> DiscreteField {
    let n = space.num_dofs();
    let rule = &space.data_rule;
    let tab = &space.data_tab;
    let ref_measure = space.cell_type().reference_measure();
    let mut field = DiscreteField::zeros(space);
    for (k, cell) in space.mesh.cells.iter().enumerate() {
        let out = &mut field.coeffs[k * n..(k + 1) * n];
        for (q, (xi, w)) in rule.points.iter().zip(&rule.weights).enumerate() {
            let fx = f(cell.map.to_physical(*xi));
            for (j, v) in tab.values(q).iter().enumerate() {
                out[j] += w * fx * v;
            }
        }
        for c in out.iter_mut() {
            *c /= ref_measure;
        }
    }
    field
}

/// `L2` and broken `H1`-seminorm distances between a field and an analytic
/// function with known gradient.
pub fn error_norms(
    field: &DiscreteField,
    exact: impl Fn([f64; 2]) -> f64,
    exact_gradient: impl Fn([f64; 2]) -> [f64; 2],
) -> (f64, f64) {
    let space = field.space();
    let rule = &space.data_rule;
    let mut l2 = 0.0;
    let mut h1 = 0.0;
    for (k, cell) in space.mesh.cells.iter().enumerate() {
        let det = cell.map.det.abs();
        for (xi, w) in rule.points.iter().zip(&rule.weights) {
            let x = cell.map.to_physical(*xi);
            let e = field.evaluate(k, *xi) - exact(x);
            let g = field.gradient(k, *xi);
            let ge = exact_gradient(x);
            l2 += w * det * e * e;
            h1 += w * det * ((g[0] - ge[0]).powi(2) + (g[1] - ge[1]).powi(2));
        }
    }
    (l2.sqrt(), h1.sqrt())
}

/// Phase field and chemical potential at one time level.
#[derive(Clone, Debug)]
pub struct CoupledState {
    pub phi: DiscreteField,
    pub mu: DiscreteField,
    pub time: f64,
    pub step: usize,
}

impl CoupledState {
    pub fn new(phi: DiscreteField, mu: DiscreteField, time: f64, step: usize) -> Result<Self> {
        phi.check_same_space(&mu)?;
        Ok(CoupledState { phi, mu, time, step })
    }

    pub fn space(&self) -> &Arc<DgSpace> {
        self.phi.space()
    }

    /// Interleaved unknown vector: per cell `[phi coeffs, mu coeffs]`.
    pub fn pack(&self) -> Vec<f64> {
        pack(&self.phi, &self.mu)
    }

    /// Replace both fields from an interleaved vector.
    pub fn unpack_from(&mut self, x: &[f64]) {
        let n = self.phi.space().num_dofs();
        for k in 0..self.phi.space().num_cells() {
            self.phi.cell_mut(k).copy_from_slice(&x[2 * n * k..2 * n * k + n]);
            self.mu.cell_mut(k).copy_from_slice(&x[2 * n * k + n..2 * n * (k + 1)]);
        }
    }
}

pub(crate) fn pack(phi: &DiscreteField, mu: &DiscreteField) -> Vec<f64> {
    let n = phi.space().num_dofs();
    let mut x = Vec::with_capacity(2 * phi.coeffs().len());
    for k in 0..phi.space().num_cells() {
        x.extend_from_slice(phi.cell(k));
        x.extend_from_slice(mu.cell(k));
    }
    debug_assert_eq!(x.len(), 2 * n * phi.space().num_cells());
    x
}
