//! Energy, bound and coercivity diagnostics.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fields::{CoupledState, DiscreteField};
use crate::forms::{apply_laplace, apply_swip, potential_terms, MobilityCoefficients, SchemeParams};
use crate::space::{DgSpace, SampleSet};

/// `int W(phi)` and `a(phi, phi) / 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyParts {
    pub bulk: f64,
    pub gradient: f64,
}

pub fn energy_parts(phi: &DiscreteField, eta_laplace: f64) -> Result<EnergyParts> {
    let space = phi.space();
    let rule = &space.volume_rule;
    let tab = &space.volume_tab;
    let mut bulk = 0.0;
    for (k, cell) in space.mesh.cells.iter().enumerate() {
        let det = cell.map.det.abs();
        let c = phi.cell(k);
        for (q, w) in rule.weights.iter().enumerate() {
            bulk += w * det * potential_terms(tab.eval(q, c)).w;
        }
    }
    let gradient = 0.5 * apply_laplace(phi, phi, eta_laplace)?;
    Ok(EnergyParts { bulk, gradient })
}

/// Discrete free energy `Cn^-1 int W(phi) + (Cn / 2) a(phi, phi)`.
///
/// This is `Cn^-1` times `int W + (Cn^2 / 2) a`, the functional the scheme
/// provably dissipates.
pub fn energy(phi: &DiscreteField, params: &SchemeParams) -> Result<f64> {
    let e = energy_parts(phi, params.eta_laplace)?;
    Ok(e.bulk / params.cn + params.cn * e.gradient)
}

/// Squared mobility-weighted DG seminorm: broken gradient part and jump part.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DgSeminorm {
    pub gradient: f64,
    pub jump: f64,
}

impl DgSeminorm {
    pub fn total(&self) -> f64 {
        self.gradient + self.jump
    }
}

pub fn dg_seminorm(mu: &DiscreteField, mob: &MobilityCoefficients) -> DgSeminorm {
    let space = mu.space();
    let n = space.num_dofs();
    let mut gradient = 0.0;
    for k in 0..space.num_cells() {
        let s = space.cell_stiffness(k);
        let c = mu.cell(k);
        let mut v = 0.0;
        for i in 0..n {
            for j in 0..n {
                v += c[i] * s[i * n + j] * c[j];
            }
        }
        gradient += mob.cell[k] * v;
    }
    let mut jump = 0.0;
    let m = 2 * n;
    for (f, h) in space.faces.iter().zip(&mob.face) {
        if *h == 0.0 {
            continue;
        }
        let mut loc = Vec::with_capacity(m);
        loc.extend_from_slice(mu.cell(f.minus));
        loc.extend_from_slice(mu.cell(f.plus));
        let mut v = 0.0;
        for a in 0..m {
            for b in 0..m {
                v += loc[a] * f.penalty[a * m + b] * loc[b];
            }
        }
        jump += h * v;
    }
    DgSeminorm { gradient, jump }
}

/// Largest distance of a sampled value outside `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundReport {
    pub violation: f64,
    pub cell: usize,
    /// Physical location of the worst sample.
    pub point: [f64; 2],
}

pub fn bound_report(field: &DiscreteField, set: SampleSet, lo: f64, hi: f64) -> BoundReport {
    let space = field.space();
    let table = space.samples(set);
    let mut best = BoundReport {
        violation: 0.0,
        cell: 0,
        point: space.mesh.centroid(0),
    };
    for k in 0..space.num_cells() {
        let c = field.cell(k);
        for q in 0..table.len() {
            let v = table.tab.eval(q, c);
            let d = (v - hi).max(lo - v).max(0.0);
            if d > best.violation {
                best = BoundReport {
                    violation: d,
                    cell: k,
                    point: space.mesh.cells[k].map.to_physical(table.points[q]),
                };
            }
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoercivityReport {
    pub trials: usize,
    /// Minimum over trials of `b(psi, psi) - 1/2 |sqrt(M) grad psi|^2 - (eta - eta_auto) J(psi)`.
    pub worst_margin: f64,
    /// Minimum over trials of `b(psi, psi) / |psi|^2`.
    pub worst_ratio: f64,
    /// Maximum over trials of `|b(M, 1, psi)|`.
    pub worst_constant: f64,
}

/// Randomized check of the lower bound on the mobility form. Cell averages of
/// the mobility-defining field are uniform in `[-1.2, 1.2]` so that some cells
/// and faces are degenerate.
pub fn coercivity_probe(space: &Arc<DgSpace>, eta: f64, trials: usize, seed: u64) -> Result<CoercivityReport> {
    let mut rng = Pcg64::seed_from_u64(seed);
    let n = space.num_dofs() * space.num_cells();
    let shortfall = eta - space.auto_penalty();
    let one = DiscreteField::constant(space, 1.0);
    let mut report = CoercivityReport {
        trials,
        worst_margin: f64::INFINITY,
        worst_ratio: f64::INFINITY,
        worst_constant: 0.0,
    };
    for _ in 0..trials {
        let means: Vec<f64> = (0..space.num_cells()).map(|_| rng.random_range(-1.2..1.2)).collect();
        let phi = DiscreteField::from_cell_values(&space.p0_space(), &means)?;
        let mob = MobilityCoefficients::from_field(&phi);
        let psi = DiscreteField::from_coeffs(space, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let b = apply_swip(&mob, &psi, &psi, eta)?;
        let dg = dg_seminorm(&psi, &mob);
        let margin = b - 0.5 * dg.gradient - shortfall * dg.jump;
        report.worst_margin = report.worst_margin.min(margin);
        report.worst_ratio = report.worst_ratio.min(b / psi.l2_norm().powi(2));
        let c = apply_swip(&mob, &one, &psi, eta)?;
        report.worst_constant = report.worst_constant.max(c.abs());
    }
    Ok(report)
}

/// One line of the per-step diagnostics series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub step: usize,
    pub time: f64,
    pub energy: f64,
    pub mass: f64,
    pub min_sample: f64,
    pub max_sample: f64,
    pub min_avg: f64,
    pub max_avg: f64,
    pub newton_iters: usize,
    pub residual: f64,
    pub violation: f64,
}

impl DiagnosticsRow {
    pub fn from_state(
        state: &CoupledState,
        params: &SchemeParams,
        samples: SampleSet,
        newton_iters: usize,
        residual: f64,
    ) -> Result<Self> {
        let (min_sample, max_sample) = state.phi.sample_extrema(samples);
        let (min_avg, max_avg) = state.phi.average_extrema();
        Ok(DiagnosticsRow {
            step: state.step,
            time: state.time,
            energy: energy(&state.phi, params)?,
            mass: state.phi.mass(),
            min_sample,
            max_sample,
            min_avg,
            max_avg,
            newton_iters,
            residual,
            violation: (max_sample - 1.0).max(-1.0 - min_sample).max(0.0),
        })
    }
}
