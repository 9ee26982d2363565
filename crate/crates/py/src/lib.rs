//! Python bindings for the Cahn-Hilliard DG solver.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use chdg_core::checks;
use chdg_core::diagnostics::DiagnosticsRow;
use chdg_core::error::Error;
use chdg_core::fields::CoupledState;
use chdg_core::forms;
use chdg_core::output::{csv_string, eoc_string, vtk_string};
use chdg_core::scenarios::{self, Scenario, ScenarioConfig};
use chdg_core::solver::{advance, num_steps};

create_exception!(chdg_py, ChdgError, PyException);
create_exception!(chdg_py, SolverError, ChdgError);

fn py_err(e: Error) -> PyErr {
    if e.is_solver_failure() {
        SolverError::new_err(e.to_string())
    } else {
        ChdgError::new_err(e.to_string())
    }
}

fn row_dict<'py>(py: Python<'py>, r: &DiagnosticsRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", r.step)?;
    d.set_item("time", r.time)?;
    d.set_item("energy", r.energy)?;
    d.set_item("mass", r.mass)?;
    d.set_item("min_sample", r.min_sample)?;
    d.set_item("max_sample", r.max_sample)?;
    d.set_item("min_avg", r.min_avg)?;
    d.set_item("max_avg", r.max_avg)?;
    d.set_item("newton_iters", r.newton_iters)?;
    d.set_item("residual", r.residual)?;
    d.set_item("violation", r.violation)?;
    Ok(d)
}

/// Scenario configuration; the same TOML keys as the command line tool.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ScenarioConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults of `scenario` ("spinodal", "merging" or "trig_eoc") with
    /// optional `key=value` overrides.
    #[new]
    #[pyo3(signature = (scenario, overrides = Vec::new()))]
    fn new(scenario: &str, overrides: Vec<String>) -> PyResult<Self> {
        let text = format!("scenario = {scenario:?}");
        Self::from_toml(&text, overrides)
    }

    #[staticmethod]
    #[pyo3(signature = (text, overrides = Vec::new()))]
    fn from_toml(text: &str, overrides: Vec<String>) -> PyResult<Self> {
        ScenarioConfig::from_toml(text, &overrides)
            .map(|inner| PyConfig { inner })
            .map_err(py_err)
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides = Vec::new()))]
    fn load(path: PathBuf, overrides: Vec<String>) -> PyResult<Self> {
        ScenarioConfig::from_file(&path, &overrides)
            .map(|inner| PyConfig { inner })
            .map_err(py_err)
    }

    /// Copy with `key=value` overrides applied.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        Self::from_toml(&self.inner.to_toml(), overrides)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn scenario(&self) -> &'static str {
        match self.inner.scenario {
            Scenario::Spinodal => "spinodal",
            Scenario::Merging => "merging",
            Scenario::TrigEoc => "trig_eoc",
        }
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau
    }

    #[getter]
    fn t_end(&self) -> f64 {
        self.inner.t_end
    }

    #[getter]
    fn limiter(&self) -> bool {
        self.inner.limiter
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(scenario={:?}, n={}, p={}, tau={:e}, t_end={:e})",
            self.scenario(),
            self.inner.n,
            self.inner.p,
            self.inner.tau,
            self.inner.t_end
        )
    }
}

/// A prepared simulation that can be advanced step by step.
#[pyclass(name = "Simulation", unsendable)]
struct PySimulation {
    sim: scenarios::Simulation,
    state: CoupledState,
    rows: Vec<DiagnosticsRow>,
}

#[pymethods]
impl PySimulation {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        let sim = scenarios::prepare(&config.inner).map_err(py_err)?;
        let params = *sim.operator.params();
        let row = DiagnosticsRow::from_state(&sim.initial, &params, sim.run.samples, 0, 0.0).map_err(py_err)?;
        Ok(PySimulation {
            state: sim.initial.clone(),
            sim,
            rows: vec![row],
        })
    }

    /// Advance one time step and return its diagnostics row.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let run = &self.sim.run;
        let (next, report) = advance(&self.sim.operator, &self.state, &run.newton, run.limiter.as_ref()).map_err(py_err)?;
        let params = *self.sim.operator.params();
        let row = DiagnosticsRow::from_state(&next, &params, run.samples, report.iterations, report.residual).map_err(py_err)?;
        self.state = next;
        self.rows.push(row);
        row_dict(py, self.rows.last().expect("row just pushed"))
    }

    /// Advance `steps` steps, or up to the configured end time.
    #[pyo3(signature = (steps = None))]
    fn run<'py>(&mut self, py: Python<'py>, steps: Option<usize>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let total = num_steps(self.sim.run.t_end, self.sim.operator.params().tau);
        let steps = steps.unwrap_or(total.saturating_sub(self.state.step));
        (0..steps).map(|_| self.step(py)).collect()
    }

    #[getter]
    fn time(&self) -> f64 {
        self.state.time
    }

    #[getter]
    fn step_index(&self) -> usize {
        self.state.step
    }

    #[getter]
    fn num_cells(&self) -> usize {
        self.state.space().num_cells()
    }

    #[getter]
    fn dofs_per_cell(&self) -> usize {
        self.state.space().num_dofs()
    }

    /// Modal coefficients of the phase field, cell by cell.
    fn phi(&self) -> Vec<f64> {
        self.state.phi.coeffs().to_vec()
    }

    /// Modal coefficients of the chemical potential, cell by cell.
    fn mu(&self) -> Vec<f64> {
        self.state.mu.coeffs().to_vec()
    }

    fn cell_averages(&self) -> Vec<f64> {
        self.state.phi.cell_averages()
    }

    fn mass(&self) -> f64 {
        self.state.phi.mass()
    }

    /// All diagnostics rows so far, starting with the initial state.
    fn diagnostics<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.rows.iter().map(|r| row_dict(py, r)).collect()
    }

    fn diagnostics_csv(&self) -> String {
        csv_string(&self.rows)
    }

    fn vtk(&self) -> String {
        vtk_string(&self.state)
    }
}

/// Run a configuration to its end time and return the diagnostics rows.
#[pyfunction]
fn run<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let out = scenarios::run_scenario(&config.inner, |_| {}).map_err(|f| py_err(f.error))?;
    out.rows.iter().map(|r| row_dict(py, r)).collect()
}

/// Convergence study of a trig_eoc configuration. Returns the aligned table
/// and one dict per level.
#[pyfunction]
#[pyo3(signature = (config, levels = 3))]
fn eoc<'py>(py: Python<'py>, config: &PyConfig, levels: usize) -> PyResult<(String, Vec<Bound<'py, PyDict>>)> {
    let table = scenarios::run_trig_eoc(&config.inner, levels).map_err(py_err)?;
    let rows = table
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("n", r.n)?;
            d.set_item("tau", r.tau)?;
            d.set_item("steps", r.steps)?;
            d.set_item("l2", r.l2)?;
            d.set_item("l2_eoc", r.l2_eoc)?;
            d.set_item("h1", r.h1)?;
            d.set_item("h1_eoc", r.h1_eoc)?;
            d.set_item("failure", r.failure.clone())?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((eoc_string(&table), rows))
}

/// Randomized checks of forms, Jacobian, limiter and degenerate flux as
/// `(name, passed, detail)` tuples.
#[pyfunction]
#[pyo3(signature = (seed = 20250101))]
fn run_checks(seed: u64) -> PyResult<Vec<(String, bool, String)>> {
    let outcomes = checks::run_all(seed).map_err(py_err)?;
    Ok(outcomes.into_iter().map(|c| (c.name, c.passed, c.detail)).collect())
}

#[pyfunction]
fn mobility(s: f64) -> f64 {
    forms::mobility(s)
}

#[pyfunction]
fn harmonic_average(a: f64, b: f64) -> PyResult<f64> {
    forms::harmonic_average(a, b).map_err(py_err)
}

#[pymodule]
fn chdg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PySimulation>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(eoc, m)?)?;
    m.add_function(wrap_pyfunction!(run_checks, m)?)?;
    m.add_function(wrap_pyfunction!(mobility, m)?)?;
    m.add_function(wrap_pyfunction!(harmonic_average, m)?)?;
    m.add("ChdgError", m.py().get_type::<ChdgError>())?;
    m.add("SolverError", m.py().get_type::<SolverError>())?;
    Ok(())
}
