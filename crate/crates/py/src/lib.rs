//! Python bindings. The module is importable as `oco_rg`.

use std::path::PathBuf;
use std::sync::Arc;

use nalgebra::DVector;
use oco_rg::cli::{constants_report, simulate_report, comparison_rows, verify_report};
use oco_rg::config::{load_config, parse_config, ScenarioConfig};
use oco_rg::governor::{apply, initialize_governor, GovernorKind};
use oco_rg::harness::{RegretLedger, StepRecord};
use oco_rg::plant::{CstrParams, Plant};
use oco_rg::safeset::{SafeSet, SafeSetKind};
use oco_rg::tracking::{solve_steady_state, TrackingController};
use oco_rg::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// A validated scenario configuration.
#[pyclass(name = "Scenario", module = "oco_rg")]
struct PyScenario {
    cfg: ScenarioConfig,
}

#[pymethods]
impl PyScenario {
    /// Reactor scenario with default parameters.
    #[new]
    fn new() -> PyResult<Self> {
        let cfg = ScenarioConfig::default();
        cfg.validate().map_err(py_err)?;
        Ok(Self { cfg })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self { cfg: parse_config(text).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { cfg: load_config(&path).map_err(py_err)? })
    }

    /// Copy with selected fields replaced. Kinds use the command-line spellings.
    #[pyo3(signature = (governor=None, safe_set=None, oco=None, horizon=None, seed=None))]
    fn with_overrides(
        &self,
        governor: Option<&str>,
        safe_set: Option<&str>,
        oco: Option<&str>,
        horizon: Option<usize>,
        seed: Option<u64>,
    ) -> PyResult<Self> {
        let mut cfg = self.cfg.clone();
        if let Some(g) = governor {
            cfg.governor.kind = g.parse().map_err(py_err)?;
        }
        if let Some(s) = safe_set {
            cfg.safe_set.kind = s.parse().map_err(py_err)?;
        }
        if let Some(o) = oco {
            cfg.oco.kind = o.parse().map_err(py_err)?;
        }
        if let Some(h) = horizon {
            cfg.run.horizon = h;
        }
        if let Some(s) = seed {
            cfg.run.seed = s;
            cfg.certificate.seed = s;
        }
        cfg.validate().map_err(py_err)?;
        Ok(Self { cfg })
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.cfg.run.horizon
    }

    #[getter]
    fn window(&self) -> (f64, f64) {
        (self.cfg.reference.lo, self.cfg.reference.hi)
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.cfg)
    }

    /// Runs the closed loop once.
    fn simulate(&self, py: Python<'_>) -> PyResult<PyRun> {
        let cfg = self.cfg.clone();
        let (report, out) = py.detach(move || simulate_report(&cfg)).map_err(py_err)?;
        Ok(PyRun { report: to_json(&report)?, ledger: out.ledger })
    }

    /// The four optimizer / safe-set combinations as a JSON array.
    fn comparison_json(&self, py: Python<'_>) -> PyResult<String> {
        let cfg = self.cfg.clone();
        to_json(&py.detach(move || comparison_rows(&cfg)).map_err(py_err)?)
    }

    /// Property suite results as JSON.
    fn verify_json(&self, py: Python<'_>) -> PyResult<String> {
        let cfg = self.cfg.clone();
        to_json(&py.detach(move || verify_report(&cfg)).map_err(py_err)?)
    }

    /// Estimated certificate as JSON.
    fn constants_json(&self, py: Python<'_>) -> PyResult<String> {
        let cfg = self.cfg.clone();
        to_json(&py.detach(move || constants_report(&cfg)).map_err(py_err)?.0)
    }

    /// Builds the controller and the safe set of the given kind.
    #[pyo3(signature = (kind=None))]
    fn safe_set(&self, kind: Option<&str>) -> PyResult<PySafeSet> {
        let kind: SafeSetKind = match kind {
            Some(k) => k.parse().map_err(py_err)?,
            None => self.cfg.safe_set.kind,
        };
        let ctrl = self.cfg.build_controller().map_err(py_err)?;
        let set = self.cfg.build_set(ctrl.clone(), kind).map_err(py_err)?;
        Ok(PySafeSet { ctrl, set })
    }
}

/// Trajectory and regret summary of one run.
#[pyclass(name = "Run", module = "oco_rg")]
struct PyRun {
    report: String,
    ledger: RegretLedger,
}

impl PyRun {
    fn column(&self, f: impl Fn(&StepRecord) -> f64) -> Vec<f64> {
        self.ledger.records.iter().map(f).collect()
    }
}

#[pymethods]
impl PyRun {
    #[getter]
    fn steps(&self) -> usize {
        self.ledger.records.len()
    }
    #[getter]
    fn regret(&self) -> f64 {
        self.ledger.regret()
    }
    #[getter]
    fn regret_oco(&self) -> f64 {
        self.ledger.regret_oco()
    }
    #[getter]
    fn path_length(&self) -> f64 {
        self.ledger.path_length()
    }
    #[getter]
    fn violations(&self) -> usize {
        self.ledger.violations()
    }
    fn states(&self) -> Vec<Vec<f64>> {
        self.ledger.records.iter().map(|r| r.x.clone()).collect()
    }
    fn inputs(&self) -> Vec<f64> {
        self.column(|r| r.u[0])
    }
    fn references(&self) -> Vec<f64> {
        self.column(|r| r.r)
    }
    fn governed(&self) -> Vec<f64> {
        self.column(|r| r.v)
    }
    fn benchmark(&self) -> Vec<f64> {
        self.column(|r| r.eta)
    }
    fn stage_costs(&self) -> Vec<f64> {
        self.column(|r| r.stage_cost)
    }
    /// Full report (regrets, certificate, bound checks) as JSON.
    fn report_json(&self) -> String {
        self.report.clone()
    }
    fn to_csv(&self, path: PathBuf) -> PyResult<()> {
        let f = std::fs::File::create(path).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        self.ledger.write_csv(std::io::BufWriter::new(f)).map_err(py_err)
    }
}

/// Safe set with its tracking controller.
#[pyclass(name = "SafeSet", module = "oco_rg")]
struct PySafeSet {
    ctrl: Arc<TrackingController>,
    set: Arc<SafeSet>,
}

#[pymethods]
impl PySafeSet {
    #[getter]
    fn kind(&self) -> String {
        self.set.kind().to_string()
    }
    #[getter]
    fn delta(&self) -> f64 {
        self.set.delta()
    }
    fn level(&self, v: f64) -> PyResult<f64> {
        self.set.level(v).map_err(py_err)
    }
    fn lyapunov(&self, x: Vec<f64>, v: f64) -> PyResult<f64> {
        self.ctrl.lyapunov(&DVector::from_vec(x), v).map_err(py_err)
    }
    fn contains(&self, x: Vec<f64>, v: f64) -> PyResult<bool> {
        self.set.contains(&DVector::from_vec(x), v).map_err(py_err)
    }
    fn steady_state(&self, v: f64) -> PyResult<Vec<f64>> {
        Ok(self.ctrl.steady_state().state(v).map_err(py_err)?.as_slice().to_vec())
    }
    fn control(&self, x: Vec<f64>, v: f64) -> PyResult<Vec<f64>> {
        Ok(self.ctrl.control(&DVector::from_vec(x), v).map_err(py_err)?.as_slice().to_vec())
    }
    fn closed_loop(&self, x: Vec<f64>, v: f64) -> PyResult<Vec<f64>> {
        Ok(self.ctrl.closed_loop(&DVector::from_vec(x), v).map_err(py_err)?.as_slice().to_vec())
    }
    /// One governor step from `v_prev`. Returns `(v, beta)`.
    #[pyo3(signature = (x, r, v_prev, kind="scalar"))]
    fn govern(&self, x: Vec<f64>, r: f64, v_prev: f64, kind: &str) -> PyResult<(f64, f64)> {
        let kind: GovernorKind = kind.parse().map_err(py_err)?;
        let x = DVector::from_vec(x);
        let mut st = initialize_governor(&x, v_prev, &self.set).map_err(py_err)?;
        apply(kind, &x, r, &mut st, &self.set).map_err(py_err)
    }
}

/// Reactor steady state `(c, u)` at temperature `theta` with default parameters.
#[pyfunction]
fn reactor_steady_state(theta: f64) -> PyResult<(f64, f64)> {
    solve_steady_state(theta, &CstrParams::default()).map_err(py_err)
}

/// One explicit Euler step of the reactor with default parameters.
#[pyfunction]
fn reactor_step(x: Vec<f64>, u: f64) -> PyResult<Vec<f64>> {
    let plant = oco_rg::plant::Cstr::reference();
    let next = plant.step(&DVector::from_vec(x), &DVector::from_element(1, u)).map_err(py_err)?;
    Ok(next.as_slice().to_vec())
}

#[pymodule]
#[pyo3(name = "oco_rg")]
fn oco_rg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyRun>()?;
    m.add_class::<PySafeSet>()?;
    m.add_function(wrap_pyfunction!(reactor_steady_state, m)?)?;
    m.add_function(wrap_pyfunction!(reactor_step, m)?)?;
    Ok(())
}
