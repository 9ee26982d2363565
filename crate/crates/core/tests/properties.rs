use std::sync::Arc;

use chdg_core::diagnostics::DiagnosticsRow;
use chdg_core::fields::{CoupledState, DiscreteField};
use chdg_core::forms::{apply_laplace, apply_swip, harmonic_average, MobilityCoefficients, SchemeOperator, SchemeParams};
use chdg_core::limiter::{limit_cell, LimiterConfig};
use chdg_core::mesh::{build_quad_mesh, build_tri_mesh, Rect};
use chdg_core::output::{csv_string, parse_csv};
use chdg_core::scenarios::eoc;
use chdg_core::solver::{advance, NewtonConfig};
use chdg_core::space::{DgSpace, SampleSet};
use proptest::prelude::*;

fn space(tri: bool, n: usize, p: usize) -> Arc<DgSpace> {
    let mesh = if tri {
        build_tri_mesh(n, n, Rect::unit()).unwrap()
    } else {
        build_quad_mesh(n, n, Rect::unit()).unwrap()
    };
    DgSpace::new(Arc::new(mesh), p).unwrap()
}

fn field(s: &Arc<DgSpace>, c: &[f64]) -> DiscreteField {
    let len = s.num_cells() * s.num_dofs();
    DiscreteField::from_coeffs(s, c.iter().cycle().take(len).copied().collect()).unwrap()
}

fn cell_case() -> impl Strategy<Value = (bool, usize, f64, Vec<f64>, bool)> {
    (any::<bool>(), 1usize..=3, -1.0f64..=1.0, prop::collection::vec(-3.0f64..3.0, 9), any::<bool>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn limiter_invariants((tri, p, mean, modes, boundary) in cell_case()) {
        let s = space(tri, 1, p);
        let set = if boundary { SampleSet::Boundary } else { SampleSet::Quadrature };
        let cfg = LimiterConfig { samples: set, ..LimiterConfig::default() };
        let table = s.samples(set);
        let mut c = vec![mean];
        c.extend(modes.iter().take(s.num_dofs() - 1));
        let (out, alpha) = limit_cell(&c, table, &cfg);
        prop_assert_eq!(out[0].to_bits(), c[0].to_bits());
        prop_assert!((0.0..=1.0).contains(&alpha));
        let before: f64 = c.iter().map(|x| x * x).sum();
        let after: f64 = out.iter().map(|x| x * x).sum();
        prop_assert!(after <= before * (1.0 + 1e-13));
        for q in 0..table.len() {
            let v = table.tab.eval(q, &out);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v), "sample {v}");
        }
        if mean.abs() > 1.0 - cfg.tol_avg {
            prop_assert_eq!(alpha, 0.0);
        }
    }

    #[test]
    fn limiter_is_identity_inside_bounds((tri, p, mean, modes, _b) in cell_case()) {
        let s = space(tri, 1, p);
        let table = s.samples(SampleSet::Quadrature);
        let mut c = vec![0.5 * mean];
        // Small enough to keep every sample inside (-1, 1).
        c.extend(modes.iter().take(s.num_dofs() - 1).map(|m| m * 1e-3));
        let (out, alpha) = limit_cell(&c, table, &LimiterConfig::default());
        prop_assert_eq!(alpha, 1.0);
        prop_assert_eq!(out, c);
    }

    #[test]
    fn forms_symmetric_and_semipositive(
        tri in any::<bool>(),
        p in 0usize..=2,
        u in prop::collection::vec(-1.0f64..1.0, 16),
        v in prop::collection::vec(-1.0f64..1.0, 16),
        means in prop::collection::vec(-1.2f64..1.2, 7),
    ) {
        let s = space(tri, 2, p);
        let (u, v) = (field(&s, &u), field(&s, &v));
        let cells: Vec<f64> = (0..s.num_cells()).map(|k| 1.0 - means[k % means.len()].powi(2)).map(|m| m.max(0.0)).collect();
        let mob = MobilityCoefficients::from_cell_values(&s, cells).unwrap();
        let eta = s.auto_penalty();
        let scale = 1.0 + apply_laplace(&u, &u, eta).unwrap() + apply_laplace(&v, &v, eta).unwrap();
        let d = apply_laplace(&u, &v, eta).unwrap() - apply_laplace(&v, &u, eta).unwrap();
        prop_assert!(d.abs() <= 1e-12 * scale);
        let d = apply_swip(&mob, &u, &v, eta).unwrap() - apply_swip(&mob, &v, &u, eta).unwrap();
        prop_assert!(d.abs() <= 1e-12 * scale);
        prop_assert!(apply_swip(&mob, &u, &u, eta).unwrap() >= -1e-12 * scale);
        prop_assert!(apply_laplace(&u, &u, eta).unwrap() >= -1e-12 * scale);
        let c = DiscreteField::constant(&s, means[0]);
        prop_assert!(apply_swip(&mob, &c, &v, eta).unwrap().abs() <= 1e-12 * scale);
        prop_assert!(apply_laplace(&c, &v, eta).unwrap().abs() <= 1e-12 * scale);
    }

    #[test]
    fn harmonic_average_bounds(a in 0.0f64..2.0, b in 0.0f64..2.0) {
        let h = harmonic_average(a, b).unwrap();
        prop_assert_eq!(h, harmonic_average(b, a).unwrap());
        prop_assert!(h <= 2.0 * a.min(b) + 1e-15);
        prop_assert!(h >= a.min(b) * (1.0 - 1e-15));
        prop_assert!(h <= a.max(b) * (1.0 + 1e-15));
        prop_assert_eq!(harmonic_average(0.0, b).unwrap(), 0.0);
    }

    #[test]
    fn eoc_is_log2_ratio(a in 1e-8f64..1.0, r in 0.01f64..100.0) {
        let b = a / r;
        let rate = eoc(Some(a), Some(b)).unwrap();
        prop_assert!((rate - r.ln() / std::f64::consts::LN_2).abs() <= 1e-12);
        prop_assert!(eoc(None, Some(b)).is_none());
        prop_assert!(eoc(Some(a), Some(0.0)).is_none());
    }

    #[test]
    fn csv_round_trip_is_exact(
        vals in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL, 9),
        step in 0usize..100000,
        iters in 0usize..50,
    ) {
        let row = DiagnosticsRow {
            step,
            time: vals[0],
            energy: vals[1],
            mass: vals[2],
            min_sample: vals[3],
            max_sample: vals[4],
            min_avg: vals[5],
            max_avg: vals[6],
            newton_iters: iters,
            residual: vals[7],
            violation: vals[8],
        };
        let back = parse_csv(&csv_string(std::slice::from_ref(&row))).unwrap();
        prop_assert_eq!(back.len(), 1);
        prop_assert_eq!(format!("{:?}", back[0].clone()), format!("{row:?}"));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// One step conserves mass up to the Newton tolerance and keeps the
    /// limited averages and samples inside the bounds.
    #[test]
    fn step_conserves_mass_and_bounds(
        tri in any::<bool>(),
        p in 0usize..=2,
        mean in -0.6f64..0.6,
        noise in prop::collection::vec(-0.4f64..0.4, 16),
    ) {
        let s = space(tri, 4, p);
        let vals: Vec<f64> = (0..s.num_cells()).map(|k| mean + noise[k % noise.len()]).collect();
        let mut phi = DiscreteField::zeros(&s);
        for k in 0..s.num_cells() {
            phi.cell_mut(k)[0] = vals[k];
        }
        let op = SchemeOperator::new(&s, SchemeParams::new(1.0, 0.05, 1e-3, s.auto_penalty().max(2.0), p)).unwrap();
        let mu = op.consistent_potential(&phi).unwrap();
        let st = CoupledState::new(phi, mu, 0.0, 0).unwrap();
        let tol = 1e-12;
        let cfg = NewtonConfig { tol, ..NewtonConfig::default() };
        let lim = LimiterConfig::default();
        let (next, report) = advance(&op, &st, &cfg, Some(&lim)).unwrap();
        prop_assert!(report.residual <= tol || report.stalled);
        prop_assert!((next.phi.mass() - st.phi.mass()).abs() <= 10.0 * tol);
        let (lo, hi) = next.phi.average_extrema();
        prop_assert!(lo >= -1.0 - 1e-12 && hi <= 1.0 + 1e-12);
        let (lo, hi) = next.phi.sample_extrema(SampleSet::Quadrature);
        prop_assert!(lo >= -1.0 - 1e-12 && hi <= 1.0 + 1e-12);
    }
}
