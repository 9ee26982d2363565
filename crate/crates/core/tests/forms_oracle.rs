//! Independent checks of the assembled residual and Jacobian.

use std::sync::Arc;

use chdg_core::fields::{CoupledState, DiscreteField};
use chdg_core::forms::{mobility, SchemeOperator, SchemeParams, Velocity};
use chdg_core::mesh::{build_quad_mesh, build_tri_mesh, Rect};
use chdg_core::quadrature::{make_face_quadrature, make_quadrature};
use chdg_core::space::DgSpace;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

fn space(tri: bool, n: usize, p: usize) -> Arc<DgSpace> {
    let mesh = if tri {
        build_tri_mesh(n, n, Rect::new(0.0, 1.0, 0.0, 0.8)).unwrap()
    } else {
        build_quad_mesh(n, n + 1, Rect::new(0.0, 1.2, 0.0, 1.0)).unwrap()
    };
    DgSpace::new(Arc::new(mesh), p).unwrap()
}

fn random_field(s: &Arc<DgSpace>, rng: &mut Pcg64, mean: f64, spread: f64) -> DiscreteField {
    let n = s.num_dofs();
    let c = (0..s.num_cells() * n)
        .map(|i| {
            if i % n == 0 {
                mean * rng.random_range(-1.0..1.0)
            } else {
                spread * rng.random_range(-1.0..1.0)
            }
        })
        .collect();
    DiscreteField::from_coeffs(s, c).unwrap()
}

fn unit(s: &Arc<DgSpace>, k: usize, j: usize) -> DiscreteField {
    let mut f = DiscreteField::zeros(s);
    f.cell_mut(k)[j] = 1.0;
    f
}

/// Weighted SIPG form evaluated point by point: cell weights `wc`, face weights
/// from the harmonic mean of `wc`.
fn naive_form(wc: &[f64], u: &DiscreteField, v: &DiscreteField, eta: f64, harmonic: bool) -> f64 {
    let s = u.space();
    let mesh = &s.mesh;
    let p = s.order();
    let vol = make_quadrature(mesh.cell_type(), 2 * p + 2).unwrap();
    let line = make_face_quadrature(2 * p + 2).unwrap();
    let mut total = 0.0;
    for (k, cell) in mesh.cells.iter().enumerate() {
        let det = cell.map.det.abs();
        for (xi, w) in vol.points.iter().zip(&vol.weights) {
            let gu = u.gradient(k, *xi);
            let gv = v.gradient(k, *xi);
            total += wc[k] * w * det * (gu[0] * gv[0] + gu[1] * gv[1]);
        }
    }
    for face in &mesh.faces {
        let Some(kp) = face.plus_cell else { continue };
        let km = face.minus_cell;
        let weight = if harmonic {
            let (a, b) = (wc[km], wc[kp]);
            if a + b == 0.0 {
                0.0
            } else {
                2.0 * a * b / (a + b)
            }
        } else {
            1.0
        };
        let [a, b] = face.vertices.map(|i| mesh.vertices[i]);
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let hm = mesh.cells[km].measure;
        let hp = mesh.cells[kp].measure;
        let h_e = 2.0 * hm * hp / (len * (hm + hp));
        // Normal from the minus centroid towards the plus centroid, made
        // orthogonal to the edge.
        let t = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
        let mut nrm = [t[1], -t[0]];
        let cm = mesh.centroid(km);
        let cp = mesh.centroid(kp);
        if nrm[0] * (cp[0] - cm[0]) + nrm[1] * (cp[1] - cm[1]) < 0.0 {
            nrm = [-nrm[0], -nrm[1]];
        }
        for (tq, w) in line.points.iter().zip(&line.weights) {
            let x = [a[0] + tq[0] * (b[0] - a[0]), a[1] + tq[0] * (b[1] - a[1])];
            let xm = mesh.cells[km].map.to_reference(x);
            let xp = mesh.cells[kp].map.to_reference(x);
            let ju = u.evaluate(km, xm) - u.evaluate(kp, xp);
            let jv = v.evaluate(km, xm) - v.evaluate(kp, xp);
            let dn = |f: &DiscreteField| {
                let gm = f.gradient(km, xm);
                let gp = f.gradient(kp, xp);
                0.5 * ((gm[0] + gp[0]) * nrm[0] + (gm[1] + gp[1]) * nrm[1])
            };
            total += weight * w * len * (eta / h_e * ju * jv - dn(u) * jv - dn(v) * ju);
        }
    }
    total
}

fn naive_inner(f: impl Fn(usize, [f64; 2]) -> f64, s: &Arc<DgSpace>, k: usize, j: usize) -> f64 {
    let rule = make_quadrature(s.cell_type(), 24).unwrap();
    let cell = &s.mesh.cells[k];
    rule.points
        .iter()
        .zip(&rule.weights)
        .map(|(xi, w)| w * cell.map.det.abs() * f(k, *xi) * s.basis.value(j, *xi))
        .sum()
}

fn naive_residual(
    st: &CoupledState,
    old: &DiscreteField,
    p: &SchemeParams,
    source: Option<&dyn Fn([f64; 2]) -> f64>,
) -> Vec<f64> {
    let s = st.space();
    let n = s.num_dofs();
    let mob: Vec<f64> = st.phi.cell_averages().into_iter().map(mobility).collect();
    let ones = vec![1.0; s.num_cells()];
    let mut r = vec![0.0; 2 * n * s.num_cells()];
    for k in 0..s.num_cells() {
        for j in 0..n {
            let test = unit(s, k, j);
            let dphi = naive_inner(|c, x| st.phi.evaluate(c, x) - old.evaluate(c, x), s, k, j);
            let mut rp = dphi / p.tau + naive_form(&mob, &st.mu, &test, p.eta, true) / p.pe;
            if let Some(src) = source {
                let map = s.mesh.cells[k].map;
                rp -= naive_inner(|_, x| src(map.to_physical(x)), s, k, j);
            }
            let mu = naive_inner(|c, x| st.mu.evaluate(c, x), s, k, j);
            let pot = naive_inner(|c, x| st.phi.evaluate(c, x).powi(3) - old.evaluate(c, x), s, k, j);
            let lap = naive_form(&ones, &st.phi, &test, p.eta_laplace, false);
            r[2 * n * k + j] = rp;
            r[2 * n * k + n + j] = mu - pot - p.cn * p.cn * lap;
        }
    }
    r
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[test]
fn residual_matches_naive_assembly() {
    let mut rng = Pcg64::seed_from_u64(21);
    for (tri, p) in [(false, 0), (false, 1), (true, 1), (true, 2), (false, 2)] {
        let s = space(tri, 3, p);
        let mut params = SchemeParams::new(0.7, 0.2, 0.05, 4.0, p);
        params.eta_laplace = 5.5;
        params.source_enabled = true;
        let src = |x: [f64; 2]| (3.0 * x[0]).sin() * x[1] + 0.2;
        let op = SchemeOperator::new(&s, params).unwrap().with_source(src);
        // Include one cell in a pure phase so degenerate faces appear.
        let mut phi = random_field(&s, &mut rng, 0.9, 0.3);
        phi.cell_mut(0)[0] = 1.0;
        let st = CoupledState::new(phi, random_field(&s, &mut rng, 1.0, 1.0), 0.0, 0).unwrap();
        let old = random_field(&s, &mut rng, 0.9, 0.3);
        let fast = op.residual(&st, &old).unwrap();
        let slow = naive_residual(&st, &old, &params, Some(&src));
        let scale = max_abs(&slow).max(1.0);
        let diff: Vec<f64> = fast.iter().zip(&slow).map(|(a, b)| a - b).collect();
        assert!(max_abs(&diff) <= 1e-12 * scale, "tri={tri} p={p}: {}", max_abs(&diff));
    }
}

fn fd_check(op: &SchemeOperator, st: &CoupledState, old: &DiscreteField, rng: &mut Pcg64) {
    let jac = op.jacobian(st, old).unwrap();
    let x = st.pack();
    let v: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let eps = 1e-6;
    let eval = |sign: f64| {
        let mut s2 = st.clone();
        let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + sign * eps * b).collect();
        s2.unpack_from(&xp);
        op.residual(&s2, old).unwrap()
    };
    let rp = eval(1.0);
    let rm = eval(-1.0);
    let fd: Vec<f64> = rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    let jv = jac.mul_vec(&v);
    let diff: Vec<f64> = fd.iter().zip(&jv).map(|(a, b)| a - b).collect();
    let rel = max_abs(&diff) / max_abs(&jv);
    assert!(rel < 1e-6, "relative Jacobian error {rel}");
}

#[test]
fn jacobian_matches_central_differences() {
    let mut rng = Pcg64::seed_from_u64(8);
    for (tri, p) in [(false, 0), (false, 1), (true, 1), (true, 2)] {
        let s = space(tri, 3, p);
        let params = SchemeParams::new(0.5, 0.3, 0.01, 6.0, p);
        let op = SchemeOperator::new(&s, params).unwrap();
        for _ in 0..3 {
            let st = CoupledState::new(
                random_field(&s, &mut rng, 0.8, 0.3),
                random_field(&s, &mut rng, 1.0, 1.0),
                0.0,
                0,
            )
            .unwrap();
            let old = random_field(&s, &mut rng, 0.8, 0.3);
            fd_check(&op, &st, &old, &mut rng);
        }
    }
}

#[test]
fn jacobian_with_advection_matches_central_differences() {
    let mut rng = Pcg64::seed_from_u64(12);
    let s = space(true, 3, 1);
    let mut params = SchemeParams::new(0.5, 0.3, 0.01, 6.0, 1);
    params.advection_enabled = true;
    let u = Velocity::Field(Arc::new(|x: [f64; 2]| [1.0 - x[1], 0.5 + x[0]]));
    let op = SchemeOperator::new(&s, params).unwrap().with_advection(&u).unwrap();
    let st = CoupledState::new(
        random_field(&s, &mut rng, 0.8, 0.3),
        random_field(&s, &mut rng, 1.0, 1.0),
        0.0,
        0,
    )
    .unwrap();
    let old = random_field(&s, &mut rng, 0.8, 0.3);
    fd_check(&op, &st, &old, &mut rng);
}

#[test]
fn mobility_form_rows_vanish_against_constants() {
    // Summing the phi rows of every cell's mean mode leaves only the time
    // difference: the flux terms telescope.
    let mut rng = Pcg64::seed_from_u64(30);
    let s = space(true, 4, 1);
    let mut params = SchemeParams::new(0.5, 0.3, 0.01, 6.0, 1);
    params.advection_enabled = true;
    let op = SchemeOperator::new(&s, params)
        .unwrap()
        .with_advection(&Velocity::Constant([0.3, -0.7]))
        .unwrap();
    let st = CoupledState::new(
        random_field(&s, &mut rng, 0.8, 0.3),
        random_field(&s, &mut rng, 1.0, 1.0),
        0.0,
        0,
    )
    .unwrap();
    let old = random_field(&s, &mut rng, 0.8, 0.3);
    let r = op.residual(&st, &old).unwrap();
    let n = s.num_dofs();
    let total: f64 = (0..s.num_cells()).map(|k| r[2 * n * k]).sum();
    let expected: f64 = (0..s.num_cells())
        .map(|k| s.measure(k) * (st.phi.cell(k)[0] - old.cell(k)[0]) / params.tau)
        .sum();
    assert!((total - expected).abs() <= 1e-12 * expected.abs().max(1.0));
}
