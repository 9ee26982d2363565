//! Randomized property checks of the discrete forms, the limiter and the
//! degenerate flux. `chdg check` runs them; the test suites reuse them.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

use crate::diagnostics::dg_seminorm;
use crate::error::Result;
use crate::fields::{CoupledState, DiscreteField};
use crate::forms::{apply_laplace, apply_swip, MobilityCoefficients, SchemeOperator, SchemeParams};
use crate::limiter::{limit_cell, LimiterConfig};
use crate::mesh::{build_quad_mesh, build_tri_mesh, CellType, Rect};
use crate::space::{DgSpace, SampleSet};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckOutcome {
            name: name.into(),
            passed,
            detail,
        }
    }
}

fn space(cell: CellType, n: usize, p: usize) -> Result<Arc<DgSpace>> {
    let mesh = match cell {
        CellType::Tri => build_tri_mesh(n, n, Rect::unit())?,
        CellType::Quad => build_quad_mesh(n, n, Rect::unit())?,
    };
    DgSpace::new(Arc::new(mesh), p)
}

fn test_spaces() -> Result<Vec<Arc<DgSpace>>> {
    let mut out = Vec::new();
    for cell in [CellType::Tri, CellType::Quad] {
        for p in 0..=2 {
            out.push(space(cell, 3, p)?);
        }
    }
    Ok(out)
}

fn random_field(space: &Arc<DgSpace>, rng: &mut Pcg64) -> Result<DiscreteField> {
    let n = space.num_dofs() * space.num_cells();
    DiscreteField::from_coeffs(space, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Mobility from cell averages uniform in `[-1.2, 1.2]`, so that some cells
/// and faces are degenerate.
fn random_mobility(space: &Arc<DgSpace>, rng: &mut Pcg64) -> Result<MobilityCoefficients> {
    let means: Vec<f64> = (0..space.num_cells()).map(|_| rng.random_range(-1.2..1.2)).collect();
    Ok(MobilityCoefficients::from_field(&DiscreteField::from_cell_values(
        &space.p0_space(),
        &means,
    )?))
}

/// Symmetry, semi-positivity and constant annihilation of both forms with
/// the automatic penalty. Tolerances are relative to the Cauchy-Schwarz
/// scale of each pairing.
pub fn check_forms(trials: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = Pcg64::seed_from_u64(seed);
    let (mut sym_a, mut sym_b, mut neg_b, mut const_b, mut const_a) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for s in test_spaces()? {
        let eta = s.auto_penalty();
        for _ in 0..trials {
            let mob = random_mobility(&s, &mut rng)?;
            let u = random_field(&s, &mut rng)?;
            let v = random_field(&s, &mut rng)?;
            let c = DiscreteField::constant(&s, rng.random_range(-2.0..2.0));

            let (auv, avu) = (apply_laplace(&u, &v, eta)?, apply_laplace(&v, &u, eta)?);
            let (auu, avv) = (apply_laplace(&u, &u, eta)?, apply_laplace(&v, &v, eta)?);
            let scale_a = (auu * avv).sqrt().max(f64::MIN_POSITIVE);
            sym_a = sym_a.max((auv - avu).abs() / scale_a);
            const_a = const_a.max(apply_laplace(&c, &v, eta)?.abs() / avv.sqrt().max(1.0));

            let (buv, bvu) = (apply_swip(&mob, &u, &v, eta)?, apply_swip(&mob, &v, &u, eta)?);
            let du = dg_seminorm(&u, &mob);
            let dv = dg_seminorm(&v, &mob);
            let norm_u = du.gradient + eta * du.jump;
            let norm_v = dv.gradient + eta * dv.jump;
            let scale_b = (norm_u * norm_v).sqrt();
            if scale_b > 0.0 {
                sym_b = sym_b.max((buv - bvu).abs() / scale_b);
            }
            let buu = apply_swip(&mob, &u, &u, eta)?;
            neg_b = neg_b.max(-buu / norm_u.max(1.0));
            const_b = const_b.max(apply_swip(&mob, &c, &v, eta)?.abs() / norm_v.max(1.0));
        }
    }
    Ok(vec![
        CheckOutcome::new("laplace form symmetric", sym_a <= 1e-12, format!("max relative asymmetry {sym_a:.2e}")),
        CheckOutcome::new("mobility form symmetric", sym_b <= 1e-12, format!("max relative asymmetry {sym_b:.2e}")),
        CheckOutcome::new(
            "mobility form semi-positive",
            neg_b <= 1e-12,
            format!("largest relative negative part {neg_b:.2e}"),
        ),
        CheckOutcome::new(
            "mobility form annihilates constants",
            const_b <= 1e-12,
            format!("max |b(M, c, v)| relative {const_b:.2e}"),
        ),
        CheckOutcome::new(
            "laplace form annihilates constants",
            const_a <= 1e-12,
            format!("max |a(c, v)| relative {const_a:.2e}"),
        ),
    ])
}

/// Analytic Jacobian against central differences of the residual along
/// random directions. Cell averages stay inside `(-0.8, 0.8)` where the
/// residual is smooth.
pub fn check_jacobian(trials: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let spaces = test_spaces()?;
    for t in 0..trials {
        let s = &spaces[t % spaces.len()];
        let op = SchemeOperator::new(s, SchemeParams::new(0.7, 0.1, 1e-2, s.auto_penalty(), s.order()))?;
        let mut phi = random_field(s, &mut rng)?;
        for k in 0..s.num_cells() {
            let c = phi.cell_mut(k);
            c[0] *= 0.8;
            for x in &mut c[1..] {
                *x *= 0.3;
            }
        }
        let mu = random_field(s, &mut rng)?;
        let old = random_field(s, &mut rng)?;
        let state = CoupledState::new(phi, mu, 0.0, 0)?;
        let x = state.pack();
        let dir: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let jv = op.jacobian(&state, &old)?.mul_vec(&dir);
        let h = 1e-6;
        let eval = |sign: f64| -> Result<Vec<f64>> {
            let mut st = state.clone();
            let y: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + sign * h * d).collect();
            st.unpack_from(&y);
            op.residual(&st, &old)
        };
        let (rp, rm) = (eval(1.0)?, eval(-1.0)?);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..x.len() {
            let fd = (rp[i] - rm[i]) / (2.0 * h);
            num += (fd - jv[i]).powi(2);
            den += jv[i] * jv[i];
        }
        worst = worst.max((num / den.max(f64::MIN_POSITIVE)).sqrt());
    }
    Ok(CheckOutcome::new(
        "jacobian matches central differences",
        worst <= 1e-6,
        format!("{trials} trials, max relative deviation {worst:.2e}"),
    ))
}

/// Limiter on random cells of every cell type and order 1..=3. Averages
/// come partly from a band around the bounds.
pub fn check_limiter(cells: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let cfg = LimiterConfig::default();
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut spaces = Vec::new();
    for cell in [CellType::Tri, CellType::Quad] {
        for p in 1..=3 {
            spaces.push(space(cell, 1, p)?);
        }
    }
    let (mut mean_kept, mut l2_ok, mut alpha_ok, mut flat_ok, mut bounds_ok) = (true, true, true, true, true);
    let (mut worst_growth, mut worst_bound) = (0.0f64, 0.0f64);
    for i in 0..cells {
        let s = &spaces[i % spaces.len()];
        let set = if i % 2 == 0 { SampleSet::Quadrature } else { SampleSet::Boundary };
        let cfg = LimiterConfig { samples: set, ..cfg };
        let table = s.samples(set);
        let n = s.num_dofs();
        let mean = match i % 4 {
            0 => 1.0 - rng.random_range(0.0..2e-14),
            1 => -1.0 + rng.random_range(0.0..1e-3),
            _ => rng.random_range(-1.0..1.0),
        };
        let spread = 10f64.powf(rng.random_range(-3.0..0.5));
        let mut c = vec![mean];
        c.extend((1..n).map(|_| spread * rng.random_range(-1.0..1.0)));
        let (out, alpha) = limit_cell(&c, table, &cfg);
        mean_kept &= out[0].to_bits() == c[0].to_bits();
        // Orthogonal basis with <phi_i, phi_j> = delta_ij |K|.
        let before: f64 = c.iter().map(|x| x * x).sum();
        let after: f64 = out.iter().map(|x| x * x).sum();
        let growth = (after - before) / before.max(1.0);
        worst_growth = worst_growth.max(growth);
        l2_ok &= growth <= 1e-13;
        alpha_ok &= (0.0..=1.0).contains(&alpha);
        if mean.abs() > 1.0 - cfg.tol_avg {
            flat_ok &= alpha == 0.0 && out[1..].iter().all(|x| *x == 0.0);
        }
        for q in 0..table.len() {
            let v = table.tab.eval(q, &out);
            let d = (v - cfg.phi_max).max(cfg.phi_min - v).max(0.0);
            worst_bound = worst_bound.max(d);
        }
        bounds_ok &= worst_bound <= 1e-12;
    }
    Ok(vec![
        CheckOutcome::new("limiter keeps averages bitwise", mean_kept, format!("{cells} cells")),
        CheckOutcome::new(
            "limiter does not increase cell L2 norm",
            l2_ok,
            format!("max relative growth {worst_growth:.2e}"),
        ),
        CheckOutcome::new("limiter scaling in [0, 1]", alpha_ok, format!("{cells} cells")),
        CheckOutcome::new("limiter flattens cells at the bounds", flat_ok, format!("{cells} cells")),
        CheckOutcome::new(
            "limited samples inside bounds",
            bounds_ok,
            format!("max violation {worst_bound:.2e}"),
        ),
    ])
}

/// Two cells, one with average exactly 1. Its mobility vanishes, so the
/// residual row of its average must reduce to the time difference.
pub fn check_degenerate_flux(seed: u64) -> Result<CheckOutcome> {
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let meshes = [
        build_quad_mesh(2, 1, Rect::new(0.0, 2.0, 0.0, 1.0))?,
        build_tri_mesh(1, 1, Rect::unit())?,
    ];
    for mesh in meshes {
        let mesh = Arc::new(mesh);
        for p in 0..=2 {
            let s = DgSpace::new(Arc::clone(&mesh), p)?;
            let tau = 1e-3;
            let op = SchemeOperator::new(&s, SchemeParams::new(1.0, 0.05, tau, s.auto_penalty(), p))?;
            for _ in 0..10 {
                let mut phi = random_field(&s, &mut rng)?;
                phi.cell_mut(0)[0] = 1.0;
                phi.cell_mut(1)[0] = rng.random_range(-0.9..0.9);
                let mu = random_field(&s, &mut rng)?;
                let mut old = random_field(&s, &mut rng)?;
                old.cell_mut(0)[0] = rng.random_range(0.5..1.0);
                let r = op.residual(&CoupledState::new(phi.clone(), mu, 0.0, 0)?, &old)?;
                let expected = s.measure(0) / tau * (phi.cell(0)[0] - old.cell(0)[0]);
                worst = worst.max((r[0] - expected).abs() / expected.abs().max(1.0));
            }
        }
    }
    Ok(CheckOutcome::new(
        "degenerate cell decouples",
        worst <= 1e-14,
        format!("max relative deviation of the average row {worst:.2e}"),
    ))
}

/// Every check with the default trial counts.
pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = check_forms(100, seed)?;
    out.push(check_jacobian(100, seed.wrapping_add(1))?);
    out.extend(check_limiter(1000, seed.wrapping_add(2))?);
    out.push(check_degenerate_flux(seed.wrapping_add(3))?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_all(7).unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
