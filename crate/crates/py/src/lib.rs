//! Python module `mzsim`: scenarios, runs, states and their observables.

use std::path::PathBuf;

use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;

use mzsim::entangle;
use mzsim::hspace::SpaceSpec;
use mzsim::model::{Cutoffs, Hamiltonian, ModelParams, SiteLayout, Topology};
use mzsim::observables::{self, Port};
use mzsim::opalg::{LinearOperator, StateVector, C64};
use mzsim::propagate::{self, Propagator, PropagatorConfig};
use mzsim::runner::{self, Scenario, SweepAxis, TimeSeries};
use mzsim::states;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn topology(name: &str) -> PyResult<Topology> {
    match name {
        "C1" | "c1" => Ok(Topology::C1),
        "C2" | "c2" => Ok(Topology::C2),
        "single" => Ok(Topology::SingleSite),
        other => Err(PyValueError::new_err(format!("unknown topology `{other}`"))),
    }
}

/// Couplings and frequencies in units of the phonon frequency.
#[pyclass(name = "ModelParams", from_py_object)]
#[derive(Clone)]
struct PyModelParams {
    inner: ModelParams,
}

#[pymethods]
impl PyModelParams {
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<&Bound<'_, pyo3::types::PyDict>>) -> PyResult<Self> {
        let mut p = ModelParams::default();
        if let Some(d) = overrides {
            for (k, v) in d.iter() {
                let key: String = k.extract()?;
                let v: f64 = v.extract()?;
                match key.as_str() {
                    "omega" => p.omega = v,
                    "omega1" => p.omega1 = v,
                    "omega2" => p.omega2 = v,
                    "omega3" => p.omega3 = v,
                    "mu" => p.mu = v,
                    "tau" => p.tau = v,
                    "nu" => p.nu = v,
                    "epsilon" => p.epsilon = v,
                    _ => return Err(PyKeyError::new_err(key)),
                }
            }
        }
        p.validate().map_err(err)?;
        Ok(Self { inner: p })
    }

    fn as_dict(&self) -> Vec<(&'static str, f64)> {
        let p = &self.inner;
        vec![
            ("omega", p.omega),
            ("omega1", p.omega1),
            ("omega2", p.omega2),
            ("omega3", p.omega3),
            ("mu", p.mu),
            ("tau", p.tau),
            ("nu", p.nu),
            ("epsilon", p.epsilon),
        ]
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// State vector on a scenario's space.
#[pyclass(name = "State", from_py_object)]
#[derive(Clone)]
struct PyState {
    space: SpaceSpec,
    inner: StateVector,
}

#[pymethods]
impl PyState {
    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn amplitudes(&self) -> Vec<C64> {
        self.inner.amplitudes().to_vec()
    }

    fn norm(&self) -> f64 {
        self.inner.norm()
    }

    fn labels(&self) -> Vec<String> {
        self.space.labels().map(String::from).collect()
    }

    /// `<n>` of a boson mode.
    fn occupation(&self, label: &str) -> PyResult<f64> {
        observables::occupation(&self.space, &self.inner, label).map_err(err)
    }

    /// Photon number at output port A (or B) of the second beam splitter.
    #[pyo3(signature = (phi, port = "A"))]
    fn bs2_output(&self, phi: f64, port: &str) -> PyResult<f64> {
        let port = match port {
            "A" => Port::A,
            "B" => Port::B,
            _ => return Err(PyValueError::new_err("port must be 'A' or 'B'")),
        };
        observables::bs2_output_port(&self.space, &self.inner, phi, port).map_err(err)
    }

    /// `I(a:b)` in nats.
    fn mutual_information(&self, a: Vec<String>, b: Vec<String>) -> PyResult<f64> {
        let a: Vec<&str> = a.iter().map(String::as_str).collect();
        let b: Vec<&str> = b.iter().map(String::as_str).collect();
        entangle::mutual_information(&self.space, &self.inner, &a, &b).map_err(err)
    }

    /// Entropy of the reduced state of `labels`, in nats.
    fn entropy(&self, labels: Vec<String>) -> PyResult<f64> {
        let l: Vec<&str> = labels.iter().map(String::as_str).collect();
        let part = self.space.partition(&l).map_err(err)?;
        let rho = entangle::partial_trace(&self.space, &self.inner, &part).map_err(err)?;
        entangle::von_neumann_entropy(&rho).map_err(err)
    }
}

/// Hamiltonian of a scenario.
#[pyclass(name = "Hamiltonian")]
struct PyHamiltonian {
    space: SpaceSpec,
    inner: Hamiltonian,
}

#[pymethods]
impl PyHamiltonian {
    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn terms(&self) -> String {
        self.inner.describe_terms()
    }

    fn energy(&self, state: &PyState) -> f64 {
        propagate::energy(&self.inner, &state.inner)
    }

    /// `exp(-iHt) state` by Lanczos substeps.
    #[pyo3(signature = (state, t, krylov_dim = 30, tolerance = 1e-10))]
    fn evolve(&self, state: &PyState, t: f64, krylov_dim: usize, tolerance: f64) -> PyResult<PyState> {
        let cfg = PropagatorConfig { krylov_dim, step_tolerance: tolerance, ..PropagatorConfig::default() };
        let mut psi = state.inner.clone();
        Propagator::new(cfg).and_then(|mut p| p.advance(&self.inner, &mut psi, t)).map_err(err)?;
        Ok(PyState { space: self.space.clone(), inner: psi })
    }

    /// Expectation of a Hermitian operator expression, e.g. `"sz_A * c3 * c2A + h.c."`.
    fn expectation(&self, state: &PyState, layout: &str, expr: &str) -> PyResult<f64> {
        let table = SiteLayout::new(topology(layout)?).symbol_table(&self.space);
        observables::composite_expectation(&self.space, &table, &state.inner, expr).map_err(err)
    }
}

/// Recorded observables of one run.
#[pyclass(name = "TimeSeries")]
struct PyTimeSeries {
    inner: TimeSeries,
}

#[pymethods]
impl PyTimeSeries {
    #[getter]
    fn columns(&self) -> Vec<String> {
        self.inner.columns.clone()
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.inner.times.clone()
    }

    /// Values of one column; `None` off its stride.
    fn column(&self, name: &str) -> PyResult<Vec<Option<f64>>> {
        let k = self.inner.column_index(name).ok_or_else(|| PyKeyError::new_err(name.to_string()))?;
        Ok(self.inner.values.iter().map(|row| row[k]).collect())
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }

    fn meta_json(&self) -> String {
        serde_json::to_string(&self.inner.meta).expect("serialisable")
    }

    /// Writes `<dir>/<name>.csv` and `<dir>/<name>.meta.json`.
    fn write(&self, dir: PathBuf) -> PyResult<(PathBuf, PathBuf)> {
        self.inner.write(&dir).map_err(err)
    }
}

/// A resolved scenario.
#[pyclass(name = "Scenario")]
struct PyScenario {
    inner: Scenario,
}

#[pymethods]
impl PyScenario {
    #[new]
    #[pyo3(signature = (name, topology_name, alpha_sq, pump, idler, signal, phonon, params = None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        name: &str,
        topology_name: &str,
        alpha_sq: f64,
        pump: usize,
        idler: usize,
        signal: usize,
        phonon: usize,
        params: Option<PyModelParams>,
    ) -> PyResult<Self> {
        let mut s = Scenario::new(name, topology(topology_name)?, alpha_sq, Cutoffs { pump, idler, signal, phonon });
        if let Some(p) = params {
            s.params = p.inner;
        }
        Ok(Self { inner: s })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self { inner: runner::parse_scenario(text).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: runner::load_scenario(&path).map_err(err)? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn t_end(&self) -> f64 {
        self.inner.propagator.t_end
    }

    #[setter]
    fn set_t_end(&mut self, t: f64) {
        self.inner.propagator.t_end = t;
    }

    #[getter]
    fn tail_bound(&self) -> f64 {
        self.inner.tail_bound
    }

    #[setter]
    fn set_tail_bound(&mut self, v: f64) {
        self.inner.tail_bound = v;
    }

    fn observable_names(&self) -> Vec<String> {
        self.inner.observables.iter().map(|o| o.name.clone()).collect()
    }

    /// Checks labels, observables and memory; returns the dimension.
    fn validate(&self) -> PyResult<usize> {
        Ok(self.inner.validate().map_err(err)?.total_dim())
    }

    fn hamiltonian(&self) -> PyResult<PyHamiltonian> {
        let space = self.inner.space().map_err(err)?;
        let inner = self.inner.hamiltonian(&space).map_err(err)?;
        Ok(PyHamiltonian { space, inner })
    }

    fn initial_state(&self) -> PyResult<PyState> {
        let space = self.inner.space().map_err(err)?;
        let init = states::initial_state(&space, &self.inner.layout(), self.inner.alpha_sq.sqrt(), self.inner.tail_bound)
            .map_err(err)?;
        Ok(PyState { space, inner: init.state })
    }

    /// Evolves and records every observable. Releases the GIL while running.
    fn run(&self, py: Python<'_>) -> PyResult<PyTimeSeries> {
        let s = self.inner.clone();
        let inner = py.detach(move || runner::run(&s)).map_err(err)?;
        Ok(PyTimeSeries { inner })
    }

    /// Runs one value per point of `axis`; returns the runs and the JSON report.
    #[pyo3(signature = (axis, values, threshold = 1e-3))]
    fn sweep(&self, py: Python<'_>, axis: &str, values: Vec<f64>, threshold: f64) -> PyResult<(Vec<PyTimeSeries>, String)> {
        let axis = SweepAxis::parse(axis).map_err(err)?;
        let s = self.inner.clone();
        let (runs, report) = py.detach(move || runner::sweep(&s, axis, &values, threshold, 1)).map_err(err)?;
        let report = serde_json::to_string(&report).expect("serialisable");
        Ok((runs.into_iter().map(|inner| PyTimeSeries { inner }).collect(), report))
    }
}

/// Probability mass of a Poisson(`mean`) distribution above `cutoff`.
#[pyfunction]
fn poisson_tail(mean: f64, cutoff: usize) -> f64 {
    states::poisson_tail(mean, cutoff)
}

#[pymodule]
#[pyo3(name = "mzsim")]
fn mzsim_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelParams>()?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PyTimeSeries>()?;
    m.add_class::<PyState>()?;
    m.add_class::<PyHamiltonian>()?;
    m.add_function(wrap_pyfunction!(poisson_tail, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
