//! Newton iteration for one time step and the time-stepping loop.

use crate::diagnostics::DiagnosticsRow;
use crate::error::{Error, Result};
use crate::fields::{CoupledState, DiscreteField};
use crate::forms::{CellMobility, SchemeOperator};
use crate::limiter::{limit_field_in_place, LimiterConfig};
use crate::space::SampleSet;
use crate::sparse::{linear_solve, norm, BlockSparseMatrix, LinearConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonConfig {
    /// Absolute tolerance on the Euclidean residual norm.
    pub tol: f64,
    pub max_iters: usize,
    pub linear: LinearConfig,
    /// Maximum number of step halvings per iteration.
    pub max_halvings: usize,
    /// A step that cannot reduce the residual is accepted as converged when
    /// the full Newton update is below this fraction of the iterate: the
    /// residual then sits at its rounding floor. Zero disables this.
    pub stall_rtol: f64,
    /// How often a time step may be halved when Newton fails on it.
    pub max_splits: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            tol: 1e-10,
            max_iters: 25,
            linear: LinearConfig::default(),
            max_halvings: 8,
            stall_rtol: 1e-13,
            max_splits: 6,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.linear.tol > 0.0 && self.stall_rtol >= 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidArgument(
                "Newton and linear tolerances must be positive and max_iters at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NewtonReport {
    pub iterations: usize,
    pub residual: f64,
    pub linear_iterations: usize,
    /// Stopped at the rounding floor above `tol`.
    pub stalled: bool,
    /// Residual norm before the first and after every iteration.
    pub history: Vec<f64>,
    /// Number of sub-steps the time step was split into; 0 for a bare solve.
    pub substeps: usize,
}

/// Damped Newton iteration on packed unknowns.
pub fn newton_solve<R, J>(
    residual: R,
    jacobian: J,
    guess: Vec<f64>,
    cfg: &NewtonConfig,
) -> Result<(Vec<f64>, NewtonReport)>
where
    R: Fn(&[f64]) -> Result<Vec<f64>>,
    J: Fn(&[f64]) -> Result<BlockSparseMatrix>,
{
    cfg.validate()?;
    let mut x = guess;
    let mut r = residual(&x)?;
    let mut rn = norm(&r);
    let mut report = NewtonReport {
        history: vec![rn],
        ..Default::default()
    };
    while rn > cfg.tol {
        if report.iterations == cfg.max_iters {
            return Err(Error::NewtonDivergence {
                iterations: report.iterations,
                residual: rn,
            });
        }
        let step = report.iterations;
        report.iterations += 1;
        let jac = jacobian(&x)?;
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        let (dx, lin) = linear_solve(&jac, &rhs, &cfg.linear).map_err(|e| match e {
            Error::LinearStagnation { achieved, iterations, .. } => Error::LinearStagnation {
                step,
                achieved,
                iterations,
            },
            other => other,
        })?;
        report.linear_iterations += lin.iterations;

        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let trial: Vec<f64> = x.iter().zip(&dx).map(|(a, d)| a + lambda * d).collect();
            let rt = residual(&trial)?;
            let tn = norm(&rt);
            if tn < rn {
                accepted = Some((trial, rt, tn));
                break;
            }
            lambda *= 0.5;
        }
        let negligible = norm(&dx) <= cfg.stall_rtol * norm(&x).max(1.0);
        match accepted {
            Some((xn, rt, tn)) => {
                x = xn;
                r = rt;
                rn = tn;
                report.history.push(rn);
            }
            None if negligible => {}
            None => {
                return Err(Error::NewtonDivergence {
                    iterations: report.iterations,
                    residual: rn,
                })
            }
        }
        if negligible && rn > cfg.tol {
            report.stalled = true;
            break;
        }
    }
    report.residual = rn;
    Ok((x, report))
}

/// Solve one step of the scheme from `state` with `phi_old` as the explicit
/// level. The returned state carries the same time metadata as the guess.
///
/// Newton runs on the increment `phi - phi_old` so the residual can be driven
/// below the rounding level of the phase field itself. For the same reason
/// the cell mobilities are formed as `(1 - s)(1 + s)` from `phi_old` and the
/// increment.
pub fn solve_step(
    op: &SchemeOperator,
    guess: &CoupledState,
    phi_old: &DiscreteField,
    cfg: &NewtonConfig,
) -> Result<(CoupledState, NewtonReport)> {
    // Validates spaces and attached data once.
    op.residual(guess, phi_old)?;
    let n = phi_old.space().num_dofs();
    let bs = 2 * n;
    let old = phi_old.coeffs();
    let to_state = |y: &[f64]| {
        let mut x = y.to_vec();
        for (k, o) in old.chunks(n).enumerate() {
            for (j, v) in o.iter().enumerate() {
                x[bs * k + j] += v;
            }
        }
        x
    };
    let mobility = |y: &[f64]| {
        let (value, slope) = old
            .chunks(n)
            .zip(y.chunks(bs))
            .map(|(o, d)| {
                let (lo, hi) = ((1.0 - o[0]) - d[0], (1.0 + o[0]) + d[0]);
                if lo > 0.0 && hi > 0.0 {
                    // d/ds of (1 - s)(1 + s) is -2s.
                    (lo * hi, lo - hi)
                } else {
                    (0.0, 0.0)
                }
            })
            .unzip();
        CellMobility { value, slope }
    };
    let residual = |y: &[f64]| {
        let r = op.residual_with_increment(&to_state(y), old, Some(y), Some(&mobility(y)));
        if r.iter().all(|v| v.is_finite()) {
            Ok(r)
        } else {
            Err(Error::NonFinite("residual"))
        }
    };
    let jacobian = |y: &[f64]| Ok(op.jacobian_with_mobility(&to_state(y), Some(&mobility(y))));
    let mut y0 = guess.pack();
    for (k, o) in old.chunks(n).enumerate() {
        for (j, v) in o.iter().enumerate() {
            y0[bs * k + j] -= v;
        }
    }
    let (y, report) = newton_solve(residual, jacobian, y0, cfg)?;
    let mut out = guess.clone();
    out.unpack_from(&to_state(&y));
    Ok((out, report))
}

/// Advance one step of length `tau`; with a limiter the new phase field is
/// limited before returning.
///
/// If Newton fails, the step is replaced by two steps of `tau / 2`, each
/// limited, recursively up to `cfg.max_splits` times. Near the degenerate
/// bound the solution branch followed from `phi_old` can fold before the
/// full step is reached; the shorter steps stay on it.
pub fn advance(
    op: &SchemeOperator,
    state: &CoupledState,
    cfg: &NewtonConfig,
    limiter: Option<&LimiterConfig>,
) -> Result<(CoupledState, NewtonReport)> {
    let (mut next, report) = advance_split(op, state, cfg, limiter, cfg.max_splits)?;
    next.time = state.time + op.params().tau;
    next.step = state.step + 1;
    Ok((next, report))
}

fn advance_split(
    op: &SchemeOperator,
    state: &CoupledState,
    cfg: &NewtonConfig,
    limiter: Option<&LimiterConfig>,
    splits: usize,
) -> Result<(CoupledState, NewtonReport)> {
    let first = solve_step(op, state, &state.phi, cfg).map(|(mut next, report)| {
        if let Some(lim) = limiter {
            limit_field_in_place(&mut next.phi, lim);
        }
        (next, report)
    });
    match first {
        Err(Error::NewtonDivergence { .. }) if splits > 0 => {
            let mut half = op.clone();
            half.set_tau(0.5 * op.params().tau)?;
            let (mid, a) = advance_split(&half, state, cfg, limiter, splits - 1)?;
            let (next, b) = advance_split(&half, &mid, cfg, limiter, splits - 1)?;
            let report = NewtonReport {
                iterations: a.iterations + b.iterations,
                residual: b.residual,
                linear_iterations: a.linear_iterations + b.linear_iterations,
                stalled: a.stalled || b.stalled,
                history: [a.history, b.history].concat(),
                substeps: a.substeps.max(1) + b.substeps.max(1),
            };
            Ok((next, report))
        }
        other => other,
    }
}

/// Number of uniform steps of length `tau` needed to reach `t_end`.
pub fn num_steps(t_end: f64, tau: f64) -> usize {
    (((t_end / tau) - 1e-9).ceil() as usize).max(1)
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub t_end: f64,
    pub newton: NewtonConfig,
    pub limiter: Option<LimiterConfig>,
    pub samples: SampleSet,
    /// Times at which the state is stored.
    pub snapshot_times: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub rows: Vec<DiagnosticsRow>,
    pub final_state: CoupledState,
    pub snapshots: Vec<CoupledState>,
}

/// A failed run together with everything computed before the failure.
#[derive(Debug, thiserror::Error)]
#[error("run failed after {} steps: {error}", partial.final_state.step)]
pub struct RunFailure {
    pub partial: RunOutput,
    #[source]
    pub error: Error,
}

/// Step from `initial` to `cfg.t_end`, recording a diagnostics row per step.
pub fn run(
    op: &SchemeOperator,
    initial: CoupledState,
    cfg: &RunConfig,
    mut on_step: impl FnMut(&DiagnosticsRow),
) -> std::result::Result<RunOutput, Box<RunFailure>> {
    let params = *op.params();
    let steps = num_steps(cfg.t_end, params.tau);
    let mut out = RunOutput {
        rows: Vec::with_capacity(steps + 1),
        final_state: initial,
        snapshots: Vec::new(),
    };
    let fail = |out: RunOutput, error: Error| Box::new(RunFailure { partial: out, error });
    let mut pending: Vec<f64> = cfg.snapshot_times.clone();
    pending.sort_by(f64::total_cmp);

    let row = match DiagnosticsRow::from_state(&out.final_state, &params, cfg.samples, 0, 0.0) {
        Ok(r) => r,
        Err(e) => return Err(fail(out, e)),
    };
    on_step(&row);
    out.rows.push(row);
    take_snapshots(&mut pending, &mut out);

    for _ in 0..steps {
        let (next, report) = match advance(op, &out.final_state, &cfg.newton, cfg.limiter.as_ref()) {
            Ok(v) => v,
            Err(e) => return Err(fail(out, e)),
        };
        out.final_state = next;
        let row = match DiagnosticsRow::from_state(
            &out.final_state,
            &params,
            cfg.samples,
            report.iterations,
            report.residual,
        ) {
            Ok(r) => r,
            Err(e) => return Err(fail(out, e)),
        };
        on_step(&row);
        out.rows.push(row);
        take_snapshots(&mut pending, &mut out);
    }
    Ok(out)
}

fn take_snapshots(pending: &mut Vec<f64>, out: &mut RunOutput) {
    let t = out.final_state.time;
    while pending.first().is_some_and(|s| *s <= t + 1e-12) {
        pending.remove(0);
        out.snapshots.push(out.final_state.clone());
    }
}
