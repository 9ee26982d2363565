//! DG forms: the SIPG Laplacian `a`, the mobility-weighted SWIP form `b`, upwind
//! advection `c`, and the coupled residual and Jacobian of one time step.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{CoupledState, DiscreteField};
use crate::space::{DgSpace, FaceData};
use crate::sparse::BlockSparseMatrix;

/// Harmonic averages with `a + b` below this are treated as fully degenerate
/// when differentiating.
const DEGENERATE_SUM: f64 = 1e-14;

/// Degenerate mobility `max(1 - s^2, 0)`.
pub fn mobility(s: f64) -> f64 {
    (1.0 - s * s).max(0.0)
}

/// One-sided derivative of [`mobility`], zero for `|s| >= 1`.
pub fn mobility_derivative(s: f64) -> f64 {
    if s.abs() < 1.0 {
        -2.0 * s
    } else {
        0.0
    }
}

/// `2ab / (a + b)`, zero when `a + b = 0`.
pub fn harmonic_average(a: f64, b: f64) -> Result<f64> {
    if a < 0.0 || b < 0.0 || a.is_nan() || b.is_nan() {
        return Err(Error::InvalidArgument(format!(
            "harmonic average needs non-negative arguments, got ({a}, {b})"
        )));
    }
    Ok(harmonic_parts(a, b).0)
}

/// Harmonic average and its partial derivatives in `a` and `b`.
fn harmonic_parts(a: f64, b: f64) -> (f64, f64, f64) {
    let s = a + b;
    if s <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let h = 2.0 * a * b / s;
    if s < DEGENERATE_SUM {
        return (h, 0.0, 0.0);
    }
    (h, 2.0 * b * b / (s * s), 2.0 * a * a / (s * s))
}

/// Quartic double well and its Eyre splitting `W' = convex + concave`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PotentialTerms {
    pub w: f64,
    pub dw: f64,
    /// Convex part `s^3`, taken implicitly.
    pub convex: f64,
    /// Concave part `-s`, taken explicitly.
    pub concave: f64,
}

pub fn potential_terms(s: f64) -> PotentialTerms {
    let convex = s * s * s;
    let concave = -s;
    PotentialTerms {
        w: 0.25 * (s * s - 1.0).powi(2),
        dw: convex + concave,
        convex,
        concave,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SchemeParams {
    pub pe: f64,
    pub cn: f64,
    pub tau: f64,
    /// Penalty of the mobility form.
    pub eta: f64,
    /// Penalty of the Laplacian.
    pub eta_laplace: f64,
    pub order: usize,
    pub source_enabled: bool,
    pub advection_enabled: bool,
}

impl SchemeParams {
    pub fn new(pe: f64, cn: f64, tau: f64, eta: f64, order: usize) -> Self {
        SchemeParams {
            pe,
            cn,
            tau,
            eta,
            eta_laplace: eta,
            order,
            source_enabled: false,
            advection_enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("Pe", self.pe),
            ("Cn", self.cn),
            ("tau", self.tau),
            ("eta", self.eta),
            ("eta_laplace", self.eta_laplace),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.eta_laplace < self.eta {
            return Err(Error::InvalidArgument(format!(
                "eta_laplace ({}) must not be smaller than eta ({})",
                self.eta_laplace, self.eta
            )));
        }
        Ok(())
    }
}

/// Cell mobilities `M(phi_K)` and their harmonic averages on interior faces,
/// indexed like `DgSpace::faces`.
#[derive(Clone, Debug)]
pub struct MobilityCoefficients {
    pub cell: Vec<f64>,
    pub face: Vec<f64>,
}

impl MobilityCoefficients {
    /// From the cell averages of a phase field.
    pub fn from_field(phi: &DiscreteField) -> Self {
        let cell: Vec<f64> = phi.cell_averages().into_iter().map(mobility).collect();
        Self::from_cell_values(phi.space(), cell).expect("mobility is non-negative")
    }

    /// From prescribed non-negative cell mobilities.
    pub fn from_cell_values(space: &DgSpace, cell: Vec<f64>) -> Result<Self> {
        if cell.len() != space.num_cells() {
            return Err(Error::InvalidArgument(format!(
                "expected {} cell mobilities, got {}",
                space.num_cells(),
                cell.len()
            )));
        }
        let face = space
            .faces
            .iter()
            .map(|f| harmonic_average(cell[f.minus], cell[f.plus]))
            .collect::<Result<Vec<_>>>()?;
        Ok(MobilityCoefficients { cell, face })
    }

    pub fn uniform(space: &DgSpace, value: f64) -> Result<Self> {
        Self::from_cell_values(space, vec![value; space.num_cells()])
    }
}

fn gather(field: &[f64], n: usize, f: &FaceData) -> Vec<f64> {
    let mut v = Vec::with_capacity(2 * n);
    v.extend_from_slice(&field[f.minus * n..(f.minus + 1) * n]);
    v.extend_from_slice(&field[f.plus * n..(f.plus + 1) * n]);
    v
}

/// `u^T (eta P - C) v` for a face.
fn face_bilinear(f: &FaceData, eta: f64, u: &[f64], v: &[f64]) -> f64 {
    let m = u.len();
    let mut s = 0.0;
    for a in 0..m {
        let mut row = 0.0;
        for b in 0..m {
            row += (eta * f.penalty[a * m + b] - f.consistency[a * m + b]) * v[b];
        }
        s += u[a] * row;
    }
    s
}

/// `(eta P - C) v` for a face.
fn face_apply(f: &FaceData, eta: f64, v: &[f64], out: &mut [f64]) {
    let m = v.len();
    for a in 0..m {
        out[a] = (0..m)
            .map(|b| (eta * f.penalty[a * m + b] - f.consistency[a * m + b]) * v[b])
            .sum();
    }
}

fn cell_bilinear(s: &[f64], u: &[f64], v: &[f64]) -> f64 {
    let n = u.len();
    (0..n)
        .map(|i| u[i] * (0..n).map(|j| s[i * n + j] * v[j]).sum::<f64>())
        .sum()
}

/// SIPG Laplacian `a(phi, xi)` with penalty `eta` on interior faces.
pub fn apply_laplace(phi: &DiscreteField, xi: &DiscreteField, eta: f64) -> Result<f64> {
    phi.check_same_space(xi)?;
    let space = phi.space();
    let n = space.num_dofs();
    let mut total: f64 = (0..space.num_cells())
        .map(|k| cell_bilinear(space.cell_stiffness(k), phi.cell(k), xi.cell(k)))
        .sum();
    for f in &space.faces {
        total += face_bilinear(f, eta, &gather(phi.coeffs(), n, f), &gather(xi.coeffs(), n, f));
    }
    Ok(total)
}

/// Matrix of [`apply_laplace`]: entry `(i, j)` is `a(phi_j, phi_i)`.
pub fn assemble_laplace(space: &DgSpace, eta: f64) -> BlockSparseMatrix {
    let weights = vec![1.0; space.num_cells()];
    let face = vec![1.0; space.faces.len()];
    assemble_weighted(space, &weights, &face, eta)
}

/// Matrix of the mobility form for fixed coefficients.
pub fn assemble_swip(space: &DgSpace, mob: &MobilityCoefficients, eta: f64) -> BlockSparseMatrix {
    assemble_weighted(space, &mob.cell, &mob.face, eta)
}

fn assemble_weighted(space: &DgSpace, cell: &[f64], face: &[f64], eta: f64) -> BlockSparseMatrix {
    let n = space.num_dofs();
    let mut m = BlockSparseMatrix::for_space(space, n);
    for k in 0..space.num_cells() {
        let blk = m.block_mut(k, k).expect("diagonal block");
        for (b, s) in blk.iter_mut().zip(space.cell_stiffness(k)) {
            *b += cell[k] * s;
        }
    }
    for (f, w) in space.faces.iter().zip(face) {
        if *w == 0.0 {
            continue;
        }
        add_face_blocks(&mut m, f, n, 0, 0, |a, b| {
            w * (eta * f.penalty[a * 2 * n + b] - f.consistency[a * 2 * n + b])
        });
    }
    m
}

/// Scatter a local `2n x 2n` face matrix into `m`, offsetting rows and columns
/// inside each block.
fn add_face_blocks(
    m: &mut BlockSparseMatrix,
    f: &FaceData,
    n: usize,
    row_off: usize,
    col_off: usize,
    entry: impl Fn(usize, usize) -> f64,
) {
    let cells = [f.minus, f.plus];
    let bs = m.block_size();
    for (si, &ci) in cells.iter().enumerate() {
        for (sj, &cj) in cells.iter().enumerate() {
            let blk = m.block_mut(ci, cj).expect("face-neighbour block");
            for a in 0..n {
                for b in 0..n {
                    blk[(row_off + a) * bs + col_off + b] += entry(si * n + a, sj * n + b);
                }
            }
        }
    }
}

/// Mobility form `b(M, mu, psi)`; faces with vanishing harmonic average are
/// skipped.
pub fn apply_swip(
    mob: &MobilityCoefficients,
    mu: &DiscreteField,
    psi: &DiscreteField,
    eta: f64,
) -> Result<f64> {
    mu.check_same_space(psi)?;
    let space = mu.space();
    if mob.cell.len() != space.num_cells() || mob.face.len() != space.faces.len() {
        return Err(Error::SpaceMismatch);
    }
    let n = space.num_dofs();
    let mut total: f64 = (0..space.num_cells())
        .filter(|&k| mob.cell[k] != 0.0)
        .map(|k| mob.cell[k] * cell_bilinear(space.cell_stiffness(k), mu.cell(k), psi.cell(k)))
        .sum();
    for (f, h) in space.faces.iter().zip(&mob.face) {
        if *h == 0.0 {
            continue;
        }
        total += h * face_bilinear(f, eta, &gather(mu.coeffs(), n, f), &gather(psi.coeffs(), n, f));
    }
    Ok(total)
}

/// Transport velocity for the advective variant.
#[derive(Clone)]
pub enum Velocity {
    Constant([f64; 2]),
    Field(Arc<dyn Fn([f64; 2]) -> [f64; 2] + Send + Sync>),
}

impl Velocity {
    pub fn at(&self, x: [f64; 2]) -> [f64; 2] {
        match self {
            Velocity::Constant(u) => *u,
            Velocity::Field(f) => f(x),
        }
    }
}

impl fmt::Debug for Velocity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Velocity::Constant(u) => write!(f, "Velocity::Constant({u:?})"),
            Velocity::Field(_) => write!(f, "Velocity::Field(..)"),
        }
    }
}

/// Precomputed integrals of the upwind form
/// `c(u, m, psi) = int m u.grad(psi) - sum_e int ((u.n)^+ m^- + (u.n)^- m^+) [psi]`
/// for piecewise-constant `m`.
#[derive(Clone, Debug)]
pub struct AdvectionOperator {
    n: usize,
    /// `int_K u . grad(phi_j)`, per cell.
    volume: Vec<f64>,
    /// `int_e (u.n)^+ [phi_a]` and `int_e (u.n)^- [phi_a]`, `2n` per face.
    upwind: Vec<f64>,
    downwind: Vec<f64>,
}

impl AdvectionOperator {
    pub fn new(space: &DgSpace, u: &Velocity) -> Self {
        let n = space.num_dofs();
        let rule = &space.data_rule;
        let tab = &space.data_tab;
        let mut volume = vec![0.0; space.num_cells() * n];
        for (k, cell) in space.mesh.cells.iter().enumerate() {
            let det = cell.map.det.abs();
            for (q, (xi, w)) in rule.points.iter().zip(&rule.weights).enumerate() {
                let uq = u.at(cell.map.to_physical(*xi));
                for (j, g) in tab.grads(q).iter().enumerate() {
                    let g = cell.map.push_gradient(*g);
                    volume[k * n + j] += w * det * (uq[0] * g[0] + uq[1] * g[1]);
                }
            }
        }
        let mut upwind = vec![0.0; space.faces.len() * 2 * n];
        let mut downwind = vec![0.0; space.faces.len() * 2 * n];
        for (e, f) in space.faces.iter().enumerate() {
            for (q, (x, w)) in f.points.iter().zip(&f.weights).enumerate() {
                let uq = u.at(*x);
                let un = uq[0] * f.normal[0] + uq[1] * f.normal[1];
                for a in 0..n {
                    let jm = f.minus_vals[q * n + a];
                    let jp = -f.plus_vals[q * n + a];
                    upwind[e * 2 * n + a] += w * un.max(0.0) * jm;
                    upwind[e * 2 * n + n + a] += w * un.max(0.0) * jp;
                    downwind[e * 2 * n + a] += w * un.min(0.0) * jm;
                    downwind[e * 2 * n + n + a] += w * un.min(0.0) * jp;
                }
            }
        }
        AdvectionOperator {
            n,
            volume,
            upwind,
            downwind,
        }
    }

    /// Add `scale * c(u, means, phi_j)` to each test-function slot of `out`,
    /// where `out` has `stride` entries per cell.
    fn accumulate(&self, space: &DgSpace, means: &[f64], scale: f64, out: &mut [f64], stride: usize) {
        let n = self.n;
        for (k, m) in means.iter().enumerate() {
            for j in 0..n {
                out[k * stride + j] += scale * m * self.volume[k * n + j];
            }
        }
        for (e, f) in space.faces.iter().enumerate() {
            let (mm, mp) = (means[f.minus], means[f.plus]);
            for a in 0..2 * n {
                let flux = self.upwind[e * 2 * n + a] * mm + self.downwind[e * 2 * n + a] * mp;
                let row = if a < n { f.minus * stride + a } else { f.plus * stride + a - n };
                out[row] -= scale * flux;
            }
        }
    }

    /// `c(u, Pi0 phibar, psi)`.
    pub fn apply(&self, phibar: &DiscreteField, psi: &DiscreteField) -> Result<f64> {
        let space = psi.space();
        if !Arc::ptr_eq(&phibar.space().mesh, &space.mesh) || self.n != space.num_dofs() {
            return Err(Error::SpaceMismatch);
        }
        let mut per_test = vec![0.0; space.num_cells() * self.n];
        self.accumulate(space, &phibar.cell_averages(), 1.0, &mut per_test, self.n);
        Ok(per_test.iter().zip(psi.coeffs()).map(|(a, b)| a * b).sum())
    }
}

/// `c(u, Pi0 phibar, psi)`; an error unless advection is enabled.
pub fn apply_advection(
    params: &SchemeParams,
    op: &AdvectionOperator,
    phibar: &DiscreteField,
    psi: &DiscreteField,
) -> Result<f64> {
    if !params.advection_enabled {
        return Err(Error::AdvectionDisabled);
    }
    op.apply(phibar, psi)
}

/// `<f, phi_j>_K` for every cell, evaluated with the data rule.
pub fn load_vector(space: &DgSpace, f: impl Fn([f64; 2]) -> f64 + Sync) -> Vec<f64> {
    let n = space.num_dofs();
    let rule = &space.data_rule;
    let tab = &space.data_tab;
    space
        .mesh
        .cells
        .par_iter()
        .flat_map_iter(|cell| {
            let det = cell.map.det.abs();
            let mut out = vec![0.0; n];
            for (q, (xi, w)) in rule.points.iter().zip(&rule.weights).enumerate() {
                let fx = f(cell.map.to_physical(*xi));
                for (o, v) in out.iter_mut().zip(tab.values(q)) {
                    *o += w * det * fx * v;
                }
            }
            out
        })
        .collect()
}

/// The nonlinear system of one time step. Unknowns are interleaved per cell
/// as `[phi coeffs, mu coeffs]`.
/// Per-cell mobility `M(s_K)` and its derivative with respect to the mean.
#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct CellMobility {
    pub value: Vec<f64>,
    pub slope: Vec<f64>,
}

impl CellMobility {
    /// From the means in the first slot of each block of `x`.
    pub fn from_means(x: &[f64], block: usize) -> Self {
        let (value, slope) = x.chunks(block).map(|c| (mobility(c[0]), mobility_derivative(c[0]))).unzip();
        CellMobility { value, slope }
    }
}

#[derive(Clone, Debug)]
pub struct SchemeOperator {
    space: Arc<DgSpace>,
    params: SchemeParams,
    load: Option<Vec<f64>>,
    advection: Option<AdvectionOperator>,
}

impl SchemeOperator {
    pub fn new(space: &Arc<DgSpace>, params: SchemeParams) -> Result<Self> {
        params.validate()?;
        if params.order != space.order() {
            return Err(Error::InvalidArgument(format!(
                "scheme order {} does not match space order {}",
                params.order,
                space.order()
            )));
        }
        Ok(SchemeOperator {
            space: Arc::clone(space),
            params,
            load: None,
            advection: None,
        })
    }

    /// Attach a volume source `S`; used only when `source_enabled`.
    pub fn with_source(mut self, f: impl Fn([f64; 2]) -> f64 + Sync) -> Self {
        self.load = Some(load_vector(&self.space, f));
        self
    }

    pub fn with_advection(mut self, u: &Velocity) -> Result<Self> {
        if !self.params.advection_enabled {
            return Err(Error::AdvectionDisabled);
        }
        self.advection = Some(AdvectionOperator::new(&self.space, u));
        Ok(self)
    }

    pub fn space(&self) -> &Arc<DgSpace> {
        &self.space
    }

    pub fn params(&self) -> &SchemeParams {
        &self.params
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        let mut p = self.params;
        p.tau = tau;
        p.validate()?;
        self.params = p;
        Ok(())
    }

    pub fn num_unknowns(&self) -> usize {
        2 * self.space.num_dofs() * self.space.num_cells()
    }

    fn check(&self, state: &CoupledState, phi_old: &DiscreteField) -> Result<()> {
        if !Arc::ptr_eq(state.space(), &self.space) {
            return Err(Error::SpaceMismatch);
        }
        state.phi.check_same_space(&state.mu)?;
        state.phi.check_same_space(phi_old)?;
        if self.params.source_enabled && self.load.is_none() {
            return Err(Error::InvalidArgument("source enabled but no source attached".into()));
        }
        if self.params.advection_enabled && self.advection.is_none() {
            return Err(Error::InvalidArgument("advection enabled but no velocity attached".into()));
        }
        Ok(())
    }

    pub fn residual(&self, state: &CoupledState, phi_old: &DiscreteField) -> Result<Vec<f64>> {
        self.check(state, phi_old)?;
        let r = self.residual_packed(&state.pack(), phi_old.coeffs());
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("residual"));
        }
        Ok(r)
    }

    /// Residual for an interleaved unknown vector.
    pub(crate) fn residual_packed(&self, x: &[f64], old: &[f64]) -> Vec<f64> {
        self.residual_with_increment(x, old, None, None)
    }

    /// Residual where the time difference `phi - phi_old` is taken from the
    /// phi slots of `delta` instead of being recomputed from `x`, so that it
    /// is not limited by the rounding of `phi` itself. Cell mobilities are
    /// taken from `mob` when given.
    pub(crate) fn residual_with_increment(
        &self,
        x: &[f64],
        old: &[f64],
        delta: Option<&[f64]>,
        mob: Option<&CellMobility>,
    ) -> Vec<f64> {
        let space = &*self.space;
        let p = &self.params;
        let n = space.num_dofs();
        let bs = 2 * n;
        let nc = space.num_cells();
        let cn2 = p.cn * p.cn;
        let inv_pe = 1.0 / p.pe;
        let means: Vec<f64> = (0..nc).map(|k| x[k * bs]).collect();
        let own;
        let mob_cell = match mob {
            Some(m) => &m.value,
            None => {
                own = CellMobility::from_means(x, 2 * n);
                &own.value
            }
        };
        let tab = &space.volume_tab;
        let rule = &space.volume_rule;

        let mut r = vec![0.0; x.len()];
        r.par_chunks_mut(bs).enumerate().for_each(|(k, rk)| {
            let phi = &x[k * bs..k * bs + n];
            let mu = &x[k * bs + n..(k + 1) * bs];
            let phi_old = &old[k * n..(k + 1) * n];
            let meas = space.measure(k);
            let s = space.cell_stiffness(k);
            let det = space.mesh.cells[k].map.det.abs();
            for j in 0..n {
                let smu: f64 = (0..n).map(|i| s[j * n + i] * mu[i]).sum();
                let sphi: f64 = (0..n).map(|i| s[j * n + i] * phi[i]).sum();
                let d = match delta {
                    Some(d) => d[k * bs + j],
                    None => phi[j] - phi_old[j],
                };
                rk[j] = meas / p.tau * d + inv_pe * mob_cell[k] * smu;
                rk[n + j] = meas * mu[j] + meas * phi_old[j] - cn2 * sphi;
            }
            for q in 0..rule.len() {
                let v = tab.eval(q, phi);
                let wq = rule.weights[q] * det * v * v * v;
                for (j, b) in tab.values(q).iter().enumerate() {
                    rk[n + j] -= wq * b;
                }
            }
            if p.source_enabled {
                if let Some(load) = &self.load {
                    for j in 0..n {
                        rk[j] -= load[k * n + j];
                    }
                }
            }
        });

        let mut loc = vec![0.0; bs];
        let mut out = vec![0.0; bs];
        for f in &space.faces {
            let (h, _, _) = harmonic_parts(mob_cell[f.minus], mob_cell[f.plus]);
            // Laplacian on phi feeds the mu rows.
            gather_component(x, n, f, 0, &mut loc);
            face_apply(f, p.eta_laplace, &loc, &mut out);
            scatter(&mut r, n, f, n, &out, -cn2);
            if h != 0.0 {
                gather_component(x, n, f, n, &mut loc);
                face_apply(f, p.eta, &loc, &mut out);
                scatter(&mut r, n, f, 0, &out, inv_pe * h);
            }
        }
        if p.advection_enabled {
            if let Some(adv) = &self.advection {
                adv.accumulate(space, &means, -1.0, &mut r, bs);
            }
        }
        r
    }

    /// Chemical potential that satisfies the second equation for `phi` with
    /// `phi_old = phi`; a consistent starting value for the first step.
    pub fn consistent_potential(&self, phi: &DiscreteField) -> Result<DiscreteField> {
        let st = CoupledState::new(phi.clone(), DiscreteField::zeros(phi.space()), 0.0, 0)?;
        self.check(&st, phi)?;
        let r = self.residual_packed(&st.pack(), phi.coeffs());
        let n = self.space.num_dofs();
        let mut mu = st.mu;
        for k in 0..self.space.num_cells() {
            let meas = self.space.measure(k);
            for (j, m) in mu.cell_mut(k).iter_mut().enumerate() {
                *m = -r[2 * n * k + n + j] / meas;
            }
        }
        Ok(mu)
    }

    pub fn jacobian(&self, state: &CoupledState, phi_old: &DiscreteField) -> Result<BlockSparseMatrix> {
        self.check(state, phi_old)?;
        Ok(self.jacobian_packed(&state.pack()))
    }

    pub(crate) fn jacobian_packed(&self, x: &[f64]) -> BlockSparseMatrix {
        self.jacobian_with_mobility(x, None)
    }

    /// Jacobian with respect to the interleaved unknowns; with `mob` the cell
    /// mobilities and their derivatives are taken from there.
    pub(crate) fn jacobian_with_mobility(&self, x: &[f64], mob: Option<&CellMobility>) -> BlockSparseMatrix {
        let space = &*self.space;
        let p = &self.params;
        let n = space.num_dofs();
        let bs = 2 * n;
        let nc = space.num_cells();
        let cn2 = p.cn * p.cn;
        let inv_pe = 1.0 / p.pe;
        let own;
        let (mob_cell, dmob) = match mob {
            Some(m) => (&m.value, &m.slope),
            None => {
                own = CellMobility::from_means(x, bs);
                (&own.value, &own.slope)
            }
        };
        let tab = &space.volume_tab;
        let rule = &space.volume_rule;

        let diag: Vec<Vec<f64>> = (0..nc)
            .into_par_iter()
            .map(|k| {
                let phi = &x[k * bs..k * bs + n];
                let mu = &x[k * bs + n..(k + 1) * bs];
                let meas = space.measure(k);
                let s = space.cell_stiffness(k);
                let det = space.mesh.cells[k].map.det.abs();
                let mut blk = vec![0.0; bs * bs];
                for j in 0..n {
                    blk[j * bs + j] += meas / p.tau;
                    blk[(n + j) * bs + n + j] += meas;
                    let smu: f64 = (0..n).map(|i| s[j * n + i] * mu[i]).sum();
                    // d/d(mean) of M_K * (S mu)_j
                    blk[j * bs] += inv_pe * dmob[k] * smu;
                    for i in 0..n {
                        blk[j * bs + n + i] += inv_pe * mob_cell[k] * s[j * n + i];
                        blk[(n + j) * bs + i] -= cn2 * s[j * n + i];
                    }
                }
                for q in 0..rule.len() {
                    let v = tab.eval(q, phi);
                    let wq = 3.0 * rule.weights[q] * det * v * v;
                    let vals = tab.values(q);
                    for j in 0..n {
                        for i in 0..n {
                            blk[(n + j) * bs + i] -= wq * vals[j] * vals[i];
                        }
                    }
                }
                blk
            })
            .collect();

        let mut m = BlockSparseMatrix::for_space(space, bs);
        for (k, blk) in diag.into_iter().enumerate() {
            m.block_mut(k, k).expect("diagonal block").copy_from_slice(&blk);
        }

        let mut loc = vec![0.0; bs];
        let mut emu = vec![0.0; bs];
        for f in &space.faces {
            let (h, dh_m, dh_p) = harmonic_parts(mob_cell[f.minus], mob_cell[f.plus]);
            add_face_blocks(&mut m, f, n, n, 0, |a, b| {
                -cn2 * (p.eta_laplace * f.penalty[a * bs + b] - f.consistency[a * bs + b])
            });
            if h != 0.0 {
                add_face_blocks(&mut m, f, n, 0, n, |a, b| {
                    inv_pe * h * (p.eta * f.penalty[a * bs + b] - f.consistency[a * bs + b])
                });
            }
            let d_minus = dh_m * dmob[f.minus];
            let d_plus = dh_p * dmob[f.plus];
            if d_minus != 0.0 || d_plus != 0.0 {
                gather_component(x, n, f, n, &mut loc);
                face_apply(f, p.eta, &loc, &mut emu);
                for a in 0..bs {
                    let row_cell = if a < n { f.minus } else { f.plus };
                    let row = row_cell * bs + a % n;
                    m.add(row, f.minus * bs, inv_pe * d_minus * emu[a]);
                    m.add(row, f.plus * bs, inv_pe * d_plus * emu[a]);
                }
            }
        }

        if p.advection_enabled {
            if let Some(adv) = &self.advection {
                for k in 0..nc {
                    for j in 0..n {
                        m.add(k * bs + j, k * bs, -adv.volume[k * n + j]);
                    }
                }
                for (e, f) in space.faces.iter().enumerate() {
                    for a in 0..bs {
                        let row_cell = if a < n { f.minus } else { f.plus };
                        let row = row_cell * bs + a % n;
                        m.add(row, f.minus * bs, adv.upwind[e * bs + a]);
                        m.add(row, f.plus * bs, adv.downwind[e * bs + a]);
                    }
                }
            }
        }
        m
    }
}

/// Local `[minus, plus]` coefficients of one component (offset 0 for phi, `n`
/// for mu) from an interleaved vector.
///
/// The face matrices annihilate functions that are constant across the face,
/// so the common mean is removed first; rounding then scales with the jump
/// instead of with the field itself.
fn gather_component(x: &[f64], n: usize, f: &FaceData, offset: usize, out: &mut [f64]) {
    let bs = 2 * n;
    out[..n].copy_from_slice(&x[f.minus * bs + offset..f.minus * bs + offset + n]);
    out[n..].copy_from_slice(&x[f.plus * bs + offset..f.plus * bs + offset + n]);
    let shift = 0.5 * (out[0] + out[n]);
    out[0] -= shift;
    out[n] -= shift;
}

fn scatter(r: &mut [f64], n: usize, f: &FaceData, offset: usize, local: &[f64], scale: f64) {
    let bs = 2 * n;
    for a in 0..n {
        r[f.minus * bs + offset + a] += scale * local[a];
        r[f.plus * bs + offset + a] += scale * local[n + a];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_quad_mesh, build_tri_mesh, Rect};
    use rand::{Rng, SeedableRng};
    use rand_pcg::Pcg64;

    fn space(tri: bool, n: usize, p: usize) -> Arc<DgSpace> {
        let mesh = if tri {
            build_tri_mesh(n, n, Rect::unit()).unwrap()
        } else {
            build_quad_mesh(n, n, Rect::unit()).unwrap()
        };
        DgSpace::new(Arc::new(mesh), p).unwrap()
    }

    fn random(s: &Arc<DgSpace>, rng: &mut Pcg64, scale: f64) -> DiscreteField {
        let c = (0..s.num_cells() * s.num_dofs())
            .map(|_| scale * rng.random_range(-1.0..1.0))
            .collect();
        DiscreteField::from_coeffs(s, c).unwrap()
    }

    #[test]
    fn mobility_values() {
        assert_eq!(mobility(0.0), 1.0);
        assert_eq!(mobility(1.0), 0.0);
        assert_eq!(mobility(-1.0), 0.0);
        assert_eq!(mobility(1.5), 0.0);
        assert_eq!(mobility_derivative(1.0), 0.0);
        assert_eq!(mobility_derivative(0.5), -1.0);
    }

    #[test]
    fn harmonic_average_values() {
        assert_eq!(harmonic_average(1.0, 1.0).unwrap(), 1.0);
        assert_eq!(harmonic_average(0.0, 0.7).unwrap(), 0.0);
        assert_eq!(harmonic_average(0.0, 0.0).unwrap(), 0.0);
        assert!((harmonic_average(1.0, 1.0 / 3.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(harmonic_average(-0.1, 1.0).is_err());
    }

    #[test]
    fn potential_values() {
        for s in [1.0, -1.0] {
            let t = potential_terms(s);
            assert_eq!((t.w, t.dw), (0.0, 0.0));
        }
        let z = potential_terms(0.0);
        assert_eq!((z.w, z.dw, z.convex, z.concave), (0.25, 0.0, 0.0, 0.0));
        let t = potential_terms(2.0);
        assert_eq!((t.w, t.dw, t.convex, t.concave), (2.25, 6.0, 8.0, -2.0));
    }

    #[test]
    fn laplace_basic_properties() {
        let mut rng = Pcg64::seed_from_u64(5);
        for tri in [false, true] {
            let s = space(tri, 3, 2);
            let eta = 3.0 * s.auto_penalty();
            let c = DiscreteField::constant(&s, 0.4);
            let u = random(&s, &mut rng, 1.0);
            let v = random(&s, &mut rng, 1.0);
            assert!(apply_laplace(&c, &u, eta).unwrap().abs() < 1e-12);
            let a = apply_laplace(&u, &v, eta).unwrap();
            let b = apply_laplace(&v, &u, eta).unwrap();
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            assert!(apply_laplace(&u, &u, eta).unwrap() > 0.0);

            let m = assemble_laplace(&s, eta);
            let av = m.mul_vec(v.coeffs());
            let dot: f64 = av.iter().zip(u.coeffs()).map(|(x, y)| x * y).sum();
            assert!((dot - a).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn laplace_p0_is_pure_penalty() {
        let s = space(false, 2, 0);
        let f = DiscreteField::from_cell_values(&s, &[0.0, 1.0, 0.0, 0.0]).unwrap();
        // Cell 1 has two interior faces of length 1/2 with h_e = 1/2.
        let v = apply_laplace(&f, &f, 2.0).unwrap();
        assert!((v - 2.0 * (2.0 * 0.5 / 0.5)).abs() < 1e-14);
    }

    #[test]
    fn swip_degenerate_and_laplace_limits() {
        let mut rng = Pcg64::seed_from_u64(9);
        let s = space(true, 3, 1);
        let u = random(&s, &mut rng, 1.0);
        let v = random(&s, &mut rng, 1.0);
        let ones = MobilityCoefficients::from_field(&DiscreteField::constant(&s, 1.0));
        assert_eq!(apply_swip(&ones, &u, &v, 6.0).unwrap(), 0.0);
        let zeros = MobilityCoefficients::from_field(&DiscreteField::constant(&s, 0.0));
        let b = apply_swip(&zeros, &u, &v, 6.0).unwrap();
        let a = apply_laplace(&u, &v, 6.0).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        let c = DiscreteField::constant(&s, 1.0);
        let mob = MobilityCoefficients::from_field(&random(&s, &mut rng, 0.9));
        assert!(apply_swip(&mob, &c, &v, 6.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn constant_states_have_zero_residual() {
        for value in [1.0, 0.0, -1.0] {
            let s = space(false, 3, 1);
            let params = SchemeParams::new(0.3, 0.1, 1e-3, 6.0, 1);
            let op = SchemeOperator::new(&s, params).unwrap();
            let phi = DiscreteField::constant(&s, value);
            let st = CoupledState::new(phi.clone(), DiscreteField::zeros(&s), 0.0, 0).unwrap();
            let r = op.residual(&st, &phi).unwrap();
            assert!(r.iter().all(|v| v.abs() < 1e-14), "value {value}");
        }
    }

    #[test]
    fn mu_block_has_mass_matrix() {
        let s = space(true, 2, 1);
        let params = SchemeParams::new(1.0, 0.1, 1e-3, 6.0, 1);
        let op = SchemeOperator::new(&s, params).unwrap();
        let mut rng = Pcg64::seed_from_u64(2);
        let st = CoupledState::new(random(&s, &mut rng, 0.5), random(&s, &mut rng, 1.0), 0.0, 0).unwrap();
        let j = op.jacobian(&st, &st.phi).unwrap();
        let n = s.num_dofs();
        for k in 0..s.num_cells() {
            let blk = j.block(k, k).unwrap();
            for a in 0..n {
                for b in 0..n {
                    let expected = if a == b { s.measure(k) } else { 0.0 };
                    assert_eq!(blk[(n + a) * 2 * n + n + b], expected);
                }
            }
        }
    }

    #[test]
    fn advection_conserves_and_vanishes() {
        let mut rng = Pcg64::seed_from_u64(4);
        let s = space(false, 4, 1);
        let m = random(&s, &mut rng, 1.0);
        let one = DiscreteField::constant(&s, 1.0);
        let swirl = Velocity::Field(Arc::new(|x: [f64; 2]| {
            let (sx, cx) = (std::f64::consts::PI * x[0]).sin_cos();
            let (sy, cy) = (std::f64::consts::PI * x[1]).sin_cos();
            [sx * cy, -cx * sy]
        }));
        let op = AdvectionOperator::new(&s, &swirl);
        assert!(op.apply(&m, &one).unwrap().abs() < 1e-13);
        let zero = AdvectionOperator::new(&s, &Velocity::Constant([0.0, 0.0]));
        assert_eq!(zero.apply(&m, &random(&s, &mut rng, 1.0)).unwrap(), 0.0);
        let params = SchemeParams::new(1.0, 0.1, 1e-3, 6.0, 1);
        assert!(matches!(
            apply_advection(&params, &op, &m, &one),
            Err(Error::AdvectionDisabled)
        ));
    }

    #[test]
    fn advection_two_cell_hand_assembly() {
        // Cells [0,1]x[0,1] and [1,2]x[0,1], u = (1, 0), means 0.3 and -0.5.
        let mesh = Arc::new(build_quad_mesh(2, 1, Rect::new(0.0, 2.0, 0.0, 1.0)).unwrap());
        let s = DgSpace::new(mesh, 0).unwrap();
        let op = AdvectionOperator::new(&s, &Velocity::Constant([1.0, 0.0]));
        let m = DiscreteField::from_cell_values(&s, &[0.3, -0.5]).unwrap();
        // Upwind value 0.3 crosses the shared face: c(., psi) = -0.3 (psi_0 - psi_1).
        let e0 = DiscreteField::from_cell_values(&s, &[1.0, 0.0]).unwrap();
        let e1 = DiscreteField::from_cell_values(&s, &[0.0, 1.0]).unwrap();
        assert!((op.apply(&m, &e0).unwrap() + 0.3).abs() < 1e-15);
        assert!((op.apply(&m, &e1).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn params_validation() {
        assert!(SchemeParams::new(1.0, 0.1, 1e-3, 6.0, 1).validate().is_ok());
        assert!(SchemeParams::new(0.0, 0.1, 1e-3, 6.0, 1).validate().is_err());
        let mut p = SchemeParams::new(1.0, 0.1, 1e-3, 6.0, 1);
        p.eta_laplace = 1.0;
        assert!(p.validate().is_err());
        let s = space(false, 2, 0);
        assert!(SchemeOperator::new(&s, SchemeParams::new(1.0, 0.1, 1e-3, 6.0, 1)).is_err());
    }
}
