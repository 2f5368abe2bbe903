//! Python bindings. Fields cross the boundary as flat row-major lists of
//! length `M²`; reports come back as dictionaries.

use chstep_core::diagnostics;
use chstep_core::driver::{simulate, RunOptions, Scheme, Starter, StepPlan};
use chstep_core::experiments::random_initial_field;
use chstep_core::kernels;
use chstep_core::meshing::{self, AdaptiveConfig};
use chstep_core::{Field, FixedPointConfig, ModelParams};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: chstep_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_scheme(name: &str) -> PyResult<Scheme> {
    match name {
        "bdf2" => Ok(Scheme::Bdf2),
        "cn" => Ok(Scheme::Cn),
        "cncs" => Ok(Scheme::Cncs),
        _ => Err(PyValueError::new_err(format!("unknown scheme {name:?}"))),
    }
}

fn parse_starter(name: &str) -> PyResult<Starter> {
    match name {
        "tr-bdf2" => Ok(Starter::TrBdf2),
        "sdirk2" => Ok(Starter::Sdirk2),
        "bdf1" => Ok(Starter::Bdf1),
        "convex-splitting" => Ok(Starter::ConvexSplitting),
        _ => Err(PyValueError::new_err(format!("unknown starter {name:?}"))),
    }
}

/// A strictly increasing sequence of time levels.
#[pyclass(name = "TimeMesh", module = "chstep", frozen, from_py_object)]
#[derive(Clone)]
struct PyTimeMesh {
    inner: kernels::TimeMesh,
}

#[pymethods]
impl PyTimeMesh {
    #[new]
    #[pyo3(signature = (steps, start = 0.0))]
    fn new(steps: Vec<f64>, start: f64) -> PyResult<Self> {
        let inner = kernels::TimeMesh::from_steps(start, &steps).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn uniform(final_time: f64, steps: usize) -> PyResult<Self> {
        Ok(Self { inner: meshing::uniform_mesh(final_time, steps).map_err(err)? })
    }

    /// Steps `T σ_k / Σσ` with `σ_k` uniform on `(0, 1)`.
    #[staticmethod]
    fn random(final_time: f64, steps: usize, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: meshing::random_mesh(final_time, steps, seed).map_err(err)? })
    }

    /// Unit first step followed by ratios drawn uniformly from `(lo, hi)`.
    #[staticmethod]
    fn random_ratio(steps: usize, lo: f64, hi: f64, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: meshing::random_ratio_mesh(steps, lo, hi, seed).map_err(err)? })
    }

    #[getter]
    fn levels(&self) -> Vec<f64> {
        self.inner.levels().to_vec()
    }

    #[getter]
    fn steps(&self) -> Vec<f64> {
        self.inner.steps()
    }

    #[getter]
    fn ratios(&self) -> Vec<f64> {
        self.inner.ratios()
    }

    #[getter]
    fn num_steps(&self) -> usize {
        self.inner.num_steps()
    }

    #[getter]
    fn final_time(&self) -> f64 {
        self.inner.final_time()
    }

    #[getter]
    fn max_ratio(&self) -> f64 {
        self.inner.max_ratio()
    }

    /// `[θ_0^{(n)}, …, θ_{n−2}^{(n)}]`.
    fn doc_kernels(&self, n: usize) -> PyResult<Vec<f64>> {
        kernels::doc_kernels(&self.inner, n).map_err(err)
    }

    /// Largest `|Σ_j θ_{k−j}^{(k)} b_{j−n}^{(j)} − δ_{kn}|` up to level `n_max`.
    #[pyo3(signature = (n_max = None))]
    fn orthogonality_residual(&self, n_max: Option<usize>) -> PyResult<f64> {
        kernels::verify_orthogonality(&self.inner, n_max.unwrap_or(self.inner.num_steps())).map_err(err)
    }

    #[pyo3(signature = (r_user = 4.0))]
    fn certify<'py>(&self, py: Python<'py>, r_user: f64) -> PyResult<Bound<'py, PyDict>> {
        let c = kernels::stability_constants(r_user).map_err(err)?;
        let rep = kernels::certify_mesh(&self.inner, &c).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("n", rep.n)?;
        d.set_item("lambda_min", rep.lambda_min)?;
        d.set_item("lambda_max", rep.lambda_max)?;
        d.set_item("min_r_l", rep.min_r_l)?;
        d.set_item("max_r_u", rep.max_r_u)?;
        d.set_item("m1", rep.m1)?;
        d.set_item("m2", rep.m2)?;
        d.set_item("pass", rep.pass)?;
        Ok(d)
    }

    fn __len__(&self) -> usize {
        self.inner.num_steps()
    }

    fn __repr__(&self) -> String {
        format!(
            "TimeMesh(steps={}, final_time={}, max_ratio={:.4})",
            self.inner.num_steps(),
            self.inner.final_time(),
            self.inner.max_ratio()
        )
    }
}

/// A Cahn–Hilliard instance on a periodic `M × M` grid over `(0, L)²`.
#[pyclass(name = "Problem", module = "chstep", frozen)]
struct PyProblem {
    inner: chstep_core::Problem,
}

impl PyProblem {
    fn field(&self, values: Vec<f64>) -> PyResult<Field> {
        Field::from_values(self.inner.params().grid_size, values).map_err(err)
    }
}

#[pymethods]
impl PyProblem {
    #[new]
    #[pyo3(signature = (kappa, epsilon, length = 2.0 * std::f64::consts::PI, grid_size = 128))]
    fn new(kappa: f64, epsilon: f64, length: f64, grid_size: usize) -> PyResult<Self> {
        let params = ModelParams::new(kappa, epsilon, length, grid_size).map_err(err)?;
        Ok(Self { inner: chstep_core::Problem::new(params).map_err(err)? })
    }

    #[getter]
    fn grid_size(&self) -> usize {
        self.inner.params().grid_size
    }

    fn energy(&self, phi: Vec<f64>) -> PyResult<f64> {
        Ok(diagnostics::energy(&self.inner, &self.field(phi)?))
    }

    fn volume(&self, phi: Vec<f64>) -> PyResult<f64> {
        Ok(diagnostics::volume(&self.inner, &self.field(phi)?))
    }

    /// Runs a simulation from `phi0`.
    ///
    /// Pass either `mesh` (a prescribed `TimeMesh`) or `final_time` for an
    /// adaptive BDF2 run controlled by `beta`, `tau_min`, `tau_max`, `r_user`.
    #[pyo3(signature = (
        phi0, *, mesh = None, final_time = None, scheme = "bdf2", starter = None,
        beta = 1e3, tau_min = 1e-4, tau_max = 0.1, r_user = 4.0,
        energy_safe = false, tol = 1e-12
    ))]
    #[allow(clippy::too_many_arguments)]
    fn simulate<'py>(
        &self,
        py: Python<'py>,
        phi0: Vec<f64>,
        mesh: Option<PyTimeMesh>,
        final_time: Option<f64>,
        scheme: &str,
        starter: Option<&str>,
        beta: f64,
        tau_min: f64,
        tau_max: f64,
        r_user: f64,
        energy_safe: bool,
        tol: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let plan = match (mesh, final_time) {
            (Some(m), None) => StepPlan::Mesh(m.inner),
            (None, Some(t)) => StepPlan::Adaptive {
                config: AdaptiveConfig { tau_min, tau_max, beta, r_user },
                final_time: t,
                initial_step: None,
            },
            _ => return Err(PyValueError::new_err("pass exactly one of mesh= or final_time=")),
        };
        let mut opts = RunOptions::new(parse_scheme(scheme)?, plan);
        opts.starter = starter.map(parse_starter).transpose()?;
        opts.energy_safe = energy_safe;
        opts.r_user = r_user;
        opts.fixed_point = FixedPointConfig { tol, ..FixedPointConfig::default() };
        let phi0 = self.field(phi0)?;
        let out = simulate(&self.inner, &phi0, &opts, &mut |_, _, _| {}).map_err(err)?;
        let rows = out.record.rows();
        let d = PyDict::new(py);
        d.set_item("times", out.record.times())?;
        d.set_item("energies", out.record.energies())?;
        d.set_item("modified_energies", rows.iter().map(|r| r.modified_energy).collect::<Vec<_>>())?;
        d.set_item("volumes", rows.iter().map(|r| r.volume).collect::<Vec<_>>())?;
        d.set_item("iterations", rows.iter().map(|r| r.iters).collect::<Vec<_>>())?;
        d.set_item("mesh", PyTimeMesh { inner: out.mesh })?;
        d.set_item("final_field", out.final_field.into_values())?;
        d.set_item("rejections", out.rejections)?;
        Ok(d)
    }
}

#[pyfunction]
fn bdf2_coeffs(tau_prev: f64, tau_cur: f64) -> PyResult<(f64, f64)> {
    kernels::bdf2_coeffs(tau_prev, tau_cur).map_err(err)
}

#[pyfunction]
fn r_star() -> f64 {
    kernels::r_star()
}

#[pyfunction]
fn r_l(z: f64, s: f64) -> PyResult<f64> {
    kernels::r_l(z, s).map_err(err)
}

#[pyfunction]
fn r_u(z: f64, s: f64) -> PyResult<f64> {
    kernels::r_u(z, s).map_err(err)
}

/// `{"m1", "m2", "m3"}` for a ratio bound `r_user < r*`.
#[pyfunction]
#[pyo3(signature = (r_user = 4.0))]
fn stability_constants(py: Python<'_>, r_user: f64) -> PyResult<Bound<'_, PyDict>> {
    let c = kernels::stability_constants(r_user).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("r_user", c.r_user)?;
    d.set_item("r_star", c.r_star)?;
    d.set_item("m1", c.m1)?;
    d.set_item("m2", c.m2)?;
    d.set_item("m3", c.m3)?;
    Ok(d)
}

#[pyfunction]
fn convergence_order(errors: Vec<f64>, taus: Vec<f64>) -> PyResult<Vec<f64>> {
    diagnostics::convergence_order(&errors, &taus).map_err(err)
}

/// Values uniform on `(−amp, amp)` from a seeded ChaCha8 stream.
#[pyfunction]
#[pyo3(name = "random_initial_field")]
fn py_random_initial_field(size: usize, amp: f64, seed: u64) -> Vec<f64> {
    random_initial_field(size, amp, seed).into_values()
}

#[pymodule]
fn chstep(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTimeMesh>()?;
    m.add_class::<PyProblem>()?;
    m.add_function(wrap_pyfunction!(bdf2_coeffs, m)?)?;
    m.add_function(wrap_pyfunction!(r_star, m)?)?;
    m.add_function(wrap_pyfunction!(r_l, m)?)?;
    m.add_function(wrap_pyfunction!(r_u, m)?)?;
    m.add_function(wrap_pyfunction!(stability_constants, m)?)?;
    m.add_function(wrap_pyfunction!(convergence_order, m)?)?;
    m.add_function(wrap_pyfunction!(py_random_initial_field, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
