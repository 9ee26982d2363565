//! The three reference problems, their configuration and the convergence
//! study harness.

use std::f64::consts::PI;
use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{error_norms, project_l2, CoupledState, DiscreteField};
use crate::forms::{SchemeOperator, SchemeParams};
use crate::limiter::{limit_field_in_place, LimiterConfig};
use crate::mesh::{build_quad_mesh, build_tri_mesh, Rect};
use crate::solver::{num_steps, run, NewtonConfig, RunConfig, RunFailure, RunOutput};
use crate::sparse::{LinearConfig, Preconditioner};
use crate::space::{DgSpace, SampleSet};
use crate::diagnostics::DiagnosticsRow;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    TrigEoc,
    Spinodal,
    Merging,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshKind {
    Quads,
    Triangles,
}

/// Penalty of the interior penalty forms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PenaltyRepr", into = "PenaltyRepr")]
pub enum Penalty {
    /// Smallest value covered by the coercivity bound of the mesh.
    Auto,
    /// `max(1, 3 p (p + 1))`.
    Polynomial,
    Value(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PenaltyRepr {
    Name(String),
    Value(f64),
}

impl TryFrom<PenaltyRepr> for Penalty {
    type Error = String;

    fn try_from(r: PenaltyRepr) -> std::result::Result<Self, String> {
        match r {
            PenaltyRepr::Value(v) => Ok(Penalty::Value(v)),
            PenaltyRepr::Name(s) => match s.as_str() {
                "auto" => Ok(Penalty::Auto),
                "polynomial" => Ok(Penalty::Polynomial),
                other => other
                    .parse()
                    .map(Penalty::Value)
                    .map_err(|_| format!("eta must be a number, \"auto\" or \"polynomial\", got {other:?}")),
            },
        }
    }
}

impl From<Penalty> for PenaltyRepr {
    fn from(p: Penalty) -> Self {
        match p {
            Penalty::Auto => PenaltyRepr::Name("auto".into()),
            Penalty::Polynomial => PenaltyRepr::Name("polynomial".into()),
            Penalty::Value(v) => PenaltyRepr::Value(v),
        }
    }
}

impl Penalty {
    pub fn resolve(self, space: &DgSpace) -> f64 {
        match self {
            Penalty::Auto => space.auto_penalty(),
            Penalty::Polynomial => {
                let p = space.order() as f64;
                (3.0 * p * (p + 1.0)).max(1.0)
            }
            Penalty::Value(v) => v,
        }
    }
}

/// Flat key-value description of one run. Missing keys take the defaults of
/// the chosen scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub mesh: MeshKind,
    /// Cells per direction (base level for convergence studies).
    pub n: usize,
    pub p: usize,
    pub pe: f64,
    pub cn: f64,
    pub tau: f64,
    pub t_end: f64,
    pub eta: Penalty,
    /// Apply the scaling limiter after every step and to the initial data.
    pub limiter: bool,
    pub tol: f64,
    pub max_iters: usize,
    /// How often a failing time step may be halved.
    pub max_splits: usize,
    pub linear_tol: f64,
    pub linear_max_iters: usize,
    pub preconditioner: Preconditioner,
    /// Sparse LU when the Krylov solver stalls.
    pub direct_fallback: bool,
    pub seed: u64,
    /// `A1` for trig_eoc, `A2` for merging, noise half-width for spinodal.
    pub amplitude: f64,
    /// Background value of the spinodal data.
    pub mean: f64,
    pub samples: SampleSet,
    pub output_dir: PathBuf,
    /// Defaults to `T/2, 3T/4, T`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_times: Option<Vec<f64>>,
    pub write_vtk: bool,
    /// Time steps `T 2^{-(N-20)/20}` instead of halving per level.
    pub caption_tau: bool,
    pub limiter_settings: LimiterConfig,
}

impl ScenarioConfig {
    pub fn defaults(scenario: Scenario) -> Self {
        let base = ScenarioConfig {
            scenario,
            mesh: MeshKind::Triangles,
            n: 32,
            p: 1,
            pe: 1.0,
            cn: 0.01,
            tau: 1e-4,
            t_end: 0.05,
            eta: Penalty::Value(6.0),
            limiter: true,
            tol: 1e-14,
            max_iters: 25,
            max_splits: 6,
            linear_tol: 1e-10,
            linear_max_iters: 2000,
            preconditioner: Preconditioner::default(),
            direct_fallback: true,
            seed: 20250101,
            amplitude: 0.01,
            mean: 0.3,
            samples: SampleSet::Quadrature,
            output_dir: PathBuf::from("output"),
            snapshot_times: None,
            write_vtk: true,
            caption_tau: false,
            limiter_settings: LimiterConfig::default(),
        };
        match scenario {
            Scenario::Spinodal => base,
            Scenario::TrigEoc => ScenarioConfig {
                mesh: MeshKind::Quads,
                n: 40,
                p: 0,
                pe: 0.3,
                cn: 0.1,
                tau: 1e-3,
                t_end: 1e-4,
                eta: Penalty::Polynomial,
                tol: 1e-10,
                // Fourth-order systems at fine levels defeat ILU quickly;
                // leave the rest to the direct fallback.
                linear_max_iters: 300,
                amplitude: 0.1,
                write_vtk: false,
                ..base
            },
            Scenario::Merging => ScenarioConfig {
                n: 64,
                cn: 1.0 / 64.0,
                tau: 5e-5,
                t_end: 0.04,
                amplitude: 1e-8,
                ..base
            },
        }
    }

    /// Parse a TOML document and apply `key=value` overrides on top.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let scenario: Scenario = match table.get("scenario") {
            Some(v) => v.clone().try_into().map_err(|e| Error::Config(format!("scenario: {e}")))?,
            None => return Err(Error::Config("missing key `scenario`".into())),
        };
        let mut merged = toml::Table::try_from(Self::defaults(scenario)).map_err(|e| Error::Config(format!("{e}")))?;
        merge(&mut merged, table);
        let cfg: ScenarioConfig = merged.try_into().map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("pe", self.pe),
            ("cn", self.cn),
            ("tau", self.tau),
            ("t_end", self.t_end),
            ("tol", self.tol),
            ("linear_tol", self.linear_tol),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if let Penalty::Value(v) = self.eta {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("eta must be positive, got {v}"));
            }
        }
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        match self.scenario {
            Scenario::TrigEoc if !(self.amplitude > 0.0 && self.amplitude <= 1.0) => {
                return bad(format!("A1 must lie in (0, 1], got {}", self.amplitude));
            }
            Scenario::Merging if !(0.0..1.0).contains(&self.amplitude) => {
                return bad(format!("A2 must lie in [0, 1), got {}", self.amplitude));
            }
            Scenario::Spinodal if !(self.amplitude >= 0.0) => {
                return bad(format!("noise amplitude must be non-negative, got {}", self.amplitude));
            }
            Scenario::Spinodal | Scenario::Merging if self.mesh != MeshKind::Triangles => {
                return bad(format!("{:?} requires a triangle mesh", self.scenario));
            }
            _ => {}
        }
        self.limiter_settings.validate()?;
        Ok(())
    }

    pub fn newton(&self) -> NewtonConfig {
        NewtonConfig {
            tol: self.tol,
            max_iters: self.max_iters,
            max_splits: self.max_splits,
            linear: LinearConfig {
                tol: self.linear_tol,
                max_iters: self.linear_max_iters,
                preconditioner: self.preconditioner,
                direct_fallback: self.direct_fallback,
            },
            ..Default::default()
        }
    }

    pub fn limiter_config(&self) -> Option<LimiterConfig> {
        self.limiter.then_some(LimiterConfig {
            samples: self.samples,
            ..self.limiter_settings
        })
    }

    pub fn snapshot_times(&self) -> Vec<f64> {
        self.snapshot_times
            .clone()
            .unwrap_or_else(|| vec![0.5 * self.t_end, 0.75 * self.t_end, self.t_end])
    }

    pub fn build_space(&self, n: usize) -> Result<Arc<DgSpace>> {
        let mesh = match self.mesh {
            MeshKind::Quads => build_quad_mesh(n, n, Rect::unit())?,
            MeshKind::Triangles => build_tri_mesh(n, n, Rect::unit())?,
        };
        DgSpace::new(Arc::new(mesh), self.p)
    }

    fn params(&self, space: &DgSpace, tau: f64) -> SchemeParams {
        SchemeParams::new(self.pe, self.cn, tau, self.eta.resolve(space), self.p)
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key=value")))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?} crosses a non-table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Trigonometric stationary solution `A cos(4 pi x) cos(4 pi y)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrigSolution {
    pub amplitude: f64,
}

impl TrigSolution {
    pub fn value(&self, x: [f64; 2]) -> f64 {
        self.amplitude * (4.0 * PI * x[0]).cos() * (4.0 * PI * x[1]).cos()
    }

    pub fn gradient(&self, x: [f64; 2]) -> [f64; 2] {
        let (s0, c0) = (4.0 * PI * x[0]).sin_cos();
        let (s1, c1) = (4.0 * PI * x[1]).sin_cos();
        let a = -4.0 * PI * self.amplitude;
        [a * s0 * c1, a * c0 * s1]
    }

    /// Source that makes this a steady state:
    /// `-Pe^-1 div(M(phi) grad(W'(phi) - Cn^2 lap phi))`.
    ///
    /// With `lap phi = -32 pi^2 phi` the flux is `q(phi) grad phi` where
    /// `q = (1 - phi^2)(3 phi^2 - 1 + 32 pi^2 Cn^2)`.
    pub fn source(&self, x: [f64; 2], pe: f64, cn: f64) -> f64 {
        let phi = self.value(x);
        let g = self.gradient(x);
        let k = 32.0 * PI * PI * cn * cn;
        let q = (1.0 - phi * phi) * (3.0 * phi * phi - 1.0 + k);
        let dq = -2.0 * phi * (3.0 * phi * phi - 1.0 + k) + 6.0 * phi * (1.0 - phi * phi);
        let div = dq * (g[0] * g[0] + g[1] * g[1]) - 32.0 * PI * PI * phi * q;
        -div / pe
    }
}

/// Two-droplet tanh profile scaled by `1 - A2`.
pub fn merging_profile(x: [f64; 2], cn: f64, a2: f64) -> f64 {
    let r = 0.2;
    let mut s = 1.0;
    for c in [[0.3, 0.5], [0.7, 0.5]] {
        let d = ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)).sqrt();
        s += 0.5 * ((r - d) / (2f64.sqrt() * cn)).tanh();
    }
    (1.0 - a2) * (2.0 * s.min(1.0) - 1.0)
}

/// Per-cell constant `mean + U[-a, a]`, drawn in cell order.
pub fn spinodal_initial(space: &Arc<DgSpace>, mean: f64, amplitude: f64, seed: u64) -> Result<DiscreteField> {
    let mut rng = Pcg64::seed_from_u64(seed);
    let values: Vec<f64> = (0..space.num_cells())
        .map(|_| mean + if amplitude > 0.0 { rng.random_range(-amplitude..=amplitude) } else { 0.0 })
        .collect();
    DiscreteField::from_cell_values(&space.p0_space(), &values).map(|f| embed(space, &f))
}

fn embed(space: &Arc<DgSpace>, p0: &DiscreteField) -> DiscreteField {
    let mut out = DiscreteField::zeros(space);
    for k in 0..space.num_cells() {
        out.cell_mut(k)[0] = p0.cell(k)[0];
    }
    out
}

/// Everything needed to run one configured simulation.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub operator: SchemeOperator,
    pub initial: CoupledState,
    pub run: RunConfig,
}

/// Build the operator and the initial state of a spinodal or merging run, or
/// of one trig level with `n` cells per direction and step `tau`.
pub fn prepare_level(cfg: &ScenarioConfig, n: usize, tau: f64) -> Result<Simulation> {
    cfg.validate()?;
    let space = cfg.build_space(n)?;
    let mut params = cfg.params(&space, tau);
    let mut phi = match cfg.scenario {
        Scenario::TrigEoc => {
            let sol = TrigSolution {
                amplitude: cfg.amplitude,
            };
            project_l2(&space, |x| sol.value(x))
        }
        Scenario::Spinodal => spinodal_initial(&space, cfg.mean, cfg.amplitude, cfg.seed)?,
        Scenario::Merging => project_l2(&space, |x| merging_profile(x, cfg.cn, cfg.amplitude)),
    };
    let limiter = cfg.limiter_config();
    if let Some(lim) = &limiter {
        limit_field_in_place(&mut phi, lim);
    }
    let operator = if cfg.scenario == Scenario::TrigEoc {
        params.source_enabled = true;
        let sol = TrigSolution {
            amplitude: cfg.amplitude,
        };
        let (pe, cn) = (cfg.pe, cfg.cn);
        SchemeOperator::new(&space, params)?.with_source(move |x| sol.source(x, pe, cn))
    } else {
        SchemeOperator::new(&space, params)?
    };
    let mu = operator.consistent_potential(&phi)?;
    let initial = CoupledState::new(phi, mu, 0.0, 0)?;
    Ok(Simulation {
        operator,
        initial,
        run: RunConfig {
            t_end: cfg.t_end,
            newton: cfg.newton(),
            limiter,
            samples: cfg.samples,
            snapshot_times: cfg.snapshot_times(),
        },
    })
}

pub fn prepare(cfg: &ScenarioConfig) -> Result<Simulation> {
    let tau = if cfg.scenario == Scenario::TrigEoc {
        level_tau(cfg, 0)
    } else {
        cfg.tau
    };
    prepare_level(cfg, cfg.n, tau)
}

/// Run the configured scenario at its base resolution.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    on_step: impl FnMut(&DiagnosticsRow),
) -> std::result::Result<RunOutput, Box<RunFailure>> {
    let sim = prepare(cfg).map_err(|error| {
        // Nothing was computed yet: report an empty run.
        let space = cfg.build_space(1).expect("one-cell space");
        let z = DiscreteField::zeros(&space);
        let state = CoupledState::new(z.clone(), z, 0.0, 0).expect("same space");
        Box::new(RunFailure {
            partial: RunOutput {
                rows: Vec::new(),
                final_state: state,
                snapshots: Vec::new(),
            },
            error,
        })
    })?;
    run(&sim.operator, sim.initial, &sim.run, on_step)
}

fn expect_scenario(cfg: &ScenarioConfig, s: Scenario) -> std::result::Result<(), Box<RunFailure>> {
    if cfg.scenario == s {
        return Ok(());
    }
    let space = cfg.build_space(1).expect("one-cell space");
    let z = DiscreteField::zeros(&space);
    Err(Box::new(RunFailure {
        partial: RunOutput {
            rows: Vec::new(),
            final_state: CoupledState::new(z.clone(), z, 0.0, 0).expect("same space"),
            snapshots: Vec::new(),
        },
        error: Error::Config(format!("expected a {s:?} configuration, got {:?}", cfg.scenario)),
    }))
}

pub fn run_spinodal(cfg: &ScenarioConfig) -> std::result::Result<RunOutput, Box<RunFailure>> {
    expect_scenario(cfg, Scenario::Spinodal)?;
    run_scenario(cfg, |_| {})
}

pub fn run_merging(cfg: &ScenarioConfig) -> std::result::Result<RunOutput, Box<RunFailure>> {
    expect_scenario(cfg, Scenario::Merging)?;
    run_scenario(cfg, |_| {})
}

/// Time step of refinement level `level` (0 is the base mesh).
pub fn level_tau(cfg: &ScenarioConfig, level: usize) -> f64 {
    if cfg.caption_tau {
        let n = (cfg.n << level) as f64;
        cfg.t_end * 2f64.powf(-(n - 20.0) / 20.0)
    } else {
        cfg.tau.min(cfg.t_end) / (1u64 << level) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EocRow {
    pub n: usize,
    pub tau: f64,
    pub steps: usize,
    pub l2: Option<f64>,
    pub l2_eoc: Option<f64>,
    /// Broken gradient error; not reported for piecewise constants.
    pub h1: Option<f64>,
    pub h1_eoc: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EocTable {
    pub p: usize,
    pub amplitude: f64,
    pub rows: Vec<EocRow>,
}

impl EocTable {
    pub fn failed(&self) -> bool {
        self.rows.iter().any(|r| r.failure.is_some())
    }
}

/// `log2(prev / cur)` when both errors exist and are positive.
pub fn eoc(prev: Option<f64>, cur: Option<f64>) -> Option<f64> {
    match (prev, cur) {
        (Some(a), Some(b)) if a > 0.0 && b > 0.0 => Some((a / b).log2()),
        _ => None,
    }
}

/// Convergence study against the forced stationary trig solution: `levels`
/// meshes starting at `cfg.n`, doubling `N` and halving `tau` per level.
pub fn run_trig_eoc(cfg: &ScenarioConfig, levels: usize) -> Result<EocTable> {
    run_trig_eoc_with(cfg, levels, |_| {})
}

/// As [`run_trig_eoc`], reporting each finished row.
pub fn run_trig_eoc_with(cfg: &ScenarioConfig, levels: usize, mut on_row: impl FnMut(&EocRow)) -> Result<EocTable> {
    if cfg.scenario != Scenario::TrigEoc {
        return Err(Error::Config(format!("expected a TrigEoc configuration, got {:?}", cfg.scenario)));
    }
    if levels < 2 {
        return Err(Error::InvalidArgument(format!("at least two levels are needed, got {levels}")));
    }
    let sol = TrigSolution {
        amplitude: cfg.amplitude,
    };
    let mut table = EocTable {
        p: cfg.p,
        amplitude: cfg.amplitude,
        rows: Vec::with_capacity(levels),
    };
    for level in 0..levels {
        let n = cfg.n << level;
        let tau = level_tau(cfg, level);
        let mut row = EocRow {
            n,
            tau,
            steps: num_steps(cfg.t_end, tau),
            l2: None,
            l2_eoc: None,
            h1: None,
            h1_eoc: None,
            failure: None,
        };
        let outcome = prepare_level(cfg, n, tau).and_then(|sim| {
            let mut run_cfg = sim.run.clone();
            run_cfg.snapshot_times.clear();
            run(&sim.operator, sim.initial, &run_cfg, |_| {}).map_err(|f| f.error)
        });
        match outcome {
            Ok(out) => {
                let (l2, h1) = error_norms(&out.final_state.phi, |x| sol.value(x), |x| sol.gradient(x));
                row.l2 = Some(l2);
                row.h1 = (cfg.p > 0).then_some(h1);
            }
            Err(e) if e.is_solver_failure() => row.failure = Some(e.to_string()),
            Err(e) => return Err(e),
        }
        if let Some(prev) = table.rows.last() {
            row.l2_eoc = eoc(prev.l2, row.l2);
            row.h1_eoc = eoc(prev.h1, row.h1);
        }
        on_row(&row);
        table.rows.push(row);
    }
    Ok(table)
}
