//! Python module `cmps`. Matrices go in as nested sequences of numbers
//! (lists or 2-d numpy arrays) and come back as nested lists of `complex`.

use cmps_core::correlators::{SourceComponent, SourceSlot};
use cmps_core::discretizer::{self, StudyObservable};
use cmps_core::general_lindblad::{self, FieldMoments};
use cmps_core::liouvillian;
use cmps_core::trajectories::{self, Bins, Sampler, SamplerConfig};
use cmps_core::{CMatrix, CmpsError, CmpsParams, Complex64, Evaluator, Geometry, InsertionKind};
use pyo3::create_exception;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(cmps, NumericalError, PyArithmeticError);

fn err(e: CmpsError) -> PyErr {
    if e.is_numerical() {
        NumericalError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn to_matrix(rows: Vec<Vec<Complex64>>, name: &str) -> PyResult<CMatrix> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err(format!("{name} must be a non-empty square matrix")));
    }
    Ok(CMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn from_matrix(m: &CMatrix) -> Vec<Vec<Complex64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn kind(name: &str) -> PyResult<InsertionKind> {
    InsertionKind::parse(name).ok_or_else(|| {
        let names: Vec<&str> = InsertionKind::ALL.iter().map(|k| k.name()).collect();
        PyValueError::new_err(format!("unknown insertion `{name}`; expected one of {names:?}"))
    })
}

fn insertions(items: Vec<(f64, String)>) -> PyResult<Vec<(f64, InsertionKind)>> {
    items.into_iter().map(|(x, k)| Ok((x, kind(&k)?))).collect()
}

/// A cMPS `(K, R)` in thermodynamic or finite geometry.
#[pyclass(name = "Params", frozen)]
struct PyParams {
    ev: Evaluator,
}

impl PyParams {
    fn params(&self) -> &CmpsParams {
        self.ev.params()
    }
}

#[pymethods]
impl PyParams {
    #[new]
    #[pyo3(signature = (k, r, length=None, boundary_rho=None))]
    fn new(
        k: Vec<Vec<Complex64>>,
        r: Vec<Vec<Complex64>>,
        length: Option<f64>,
        boundary_rho: Option<Vec<Vec<Complex64>>>,
    ) -> PyResult<Self> {
        let k = to_matrix(k, "K")?;
        let r = to_matrix(r, "R")?;
        let geometry = match (length, boundary_rho) {
            (None, None) => Geometry::Thermodynamic,
            (Some(length), Some(rho)) => Geometry::Finite {
                length,
                boundary_rho: to_matrix(rho, "boundary_rho")?,
            },
            _ => {
                return Err(PyValueError::new_err(
                    "finite geometry needs both `length` and `boundary_rho`",
                ))
            }
        };
        let p = CmpsParams::new(k.nrows(), k, r, geometry).map_err(err)?;
        Ok(Self { ev: Evaluator::new(&p) })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.params().dim()
    }

    #[getter]
    fn k(&self) -> Vec<Vec<Complex64>> {
        from_matrix(self.params().k())
    }

    #[getter]
    fn r(&self) -> Vec<Vec<Complex64>> {
        from_matrix(self.params().r())
    }

    #[getter]
    fn thermodynamic(&self) -> bool {
        self.params().geometry().is_thermodynamic()
    }

    fn liouvillian(&self) -> Vec<Vec<Complex64>> {
        from_matrix(self.ev.liouvillian().matrix())
    }

    fn steady_state(&self) -> PyResult<Vec<Vec<Complex64>>> {
        Ok(from_matrix(&self.ev.spectral().map_err(err)?.steady_state))
    }

    /// Spectral gap; 0 for gapless states.
    fn gap(&self) -> PyResult<f64> {
        Ok(self.ev.spectral().map_err(err)?.gap)
    }

    fn eigenvalues(&self) -> PyResult<Vec<Complex64>> {
        Ok(self.ev.spectral().map_err(err)?.eigenvalues.clone())
    }

    fn density(&self) -> PyResult<f64> {
        self.ev.density().map_err(err)
    }

    /// ⟨Ψ†(0)Ψ(d)⟩ for each separation.
    fn two_point(&self, separations: Vec<f64>) -> PyResult<Vec<Complex64>> {
        Ok(self.ev.two_point(&separations).map_err(err)?.values)
    }

    fn connected_two_point(&self, separations: Vec<f64>) -> PyResult<Vec<Complex64>> {
        Ok(self.ev.connected_two_point(&separations).map_err(err)?.values)
    }

    fn pair_correlation(&self, separations: Vec<f64>) -> PyResult<Vec<Complex64>> {
        Ok(self.ev.pair_correlation(&separations).map_err(err)?.values)
    }

    fn kinetic_density(&self) -> PyResult<f64> {
        self.ev.kinetic_density().map_err(err)
    }

    fn lieb_liniger_energy(&self, coupling: f64, chemical_potential: f64) -> PyResult<f64> {
        self.ev
            .lieb_liniger_energy_density(coupling, chemical_potential)
            .map_err(err)
    }

    /// Expectation of an ordered insertion list `[(x, kind), ...]`.
    fn expectation(&self, items: Vec<(f64, String)>) -> PyResult<Complex64> {
        self.ev.expectation(&insertions(items)?).map_err(err)
    }

    fn decay_fit<'py>(&self, py: Python<'py>, d_min: f64, d_max: f64, n_points: usize) -> PyResult<Bound<'py, PyDict>> {
        let fit = self.ev.decay_fit(d_min, d_max, n_points).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("rate", fit.rate)?;
        d.set_item("prefactor", fit.prefactor)?;
        d.set_item("residual", fit.residual)?;
        d.set_item("points_used", fit.points_used)?;
        Ok(d)
    }

    /// `(c, gap)` such that the connected two-point function is bounded by `c e^{-gap d}`.
    fn clustering_bound(&self) -> PyResult<(f64, f64)> {
        let cb = self.ev.clustering_bound().map_err(err)?;
        Ok((cb.constant, cb.gap))
    }

    fn family_derivative(
        &self,
        dk: Vec<Vec<Complex64>>,
        dr: Vec<Vec<Complex64>>,
        items: Vec<(f64, String)>,
    ) -> PyResult<Complex64> {
        let dk = to_matrix(dk, "dK")?;
        let dr = to_matrix(dr, "dR")?;
        self.ev
            .family_derivative(&dk, &dr, &insertions(items)?)
            .map_err(err)
    }

    /// Functional derivative of the discretized generating functional.
    /// `slots` are `(site, component)` with component one of
    /// `lambda`, `lambda_bar`, `mu`, `mu_bar`.
    fn functional_derivative(&self, eps: f64, sites: usize, slots: Vec<(usize, String)>, h: f64) -> PyResult<Complex64> {
        let slots = slots
            .into_iter()
            .map(|(site, c)| {
                let component = match c.as_str() {
                    "lambda" => SourceComponent::Lambda,
                    "lambda_bar" => SourceComponent::LambdaBar,
                    "mu" => SourceComponent::Mu,
                    "mu_bar" => SourceComponent::MuBar,
                    other => return Err(PyValueError::new_err(format!("unknown source component `{other}`"))),
                };
                Ok(SourceSlot::new(site, component))
            })
            .collect::<PyResult<Vec<_>>>()?;
        self.ev.functional_derivative(eps, sites, &slots, h).map_err(err)
    }

    /// Lattice value of `density`, `two_point`, `pair` or `kinetic` at spacing `eps`.
    #[pyo3(signature = (observable, eps, order=1, distance=1.0))]
    fn lattice_value(&self, observable: &str, eps: f64, order: usize, distance: f64) -> PyResult<Complex64> {
        discretizer::lattice_value(self.params(), study_observable(observable, distance)?, eps, order).map_err(err)
    }

    #[pyo3(signature = (observable, epsilons, order=1, distance=1.0))]
    fn convergence_study<'py>(
        &self,
        py: Python<'py>,
        observable: &str,
        epsilons: Vec<f64>,
        order: usize,
        distance: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let study = discretizer::convergence_study(self.params(), study_observable(observable, distance)?, &epsilons, order)
            .map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("values", study.rows.iter().map(|r| r.value).collect::<Vec<_>>())?;
        d.set_item("errors", study.rows.iter().map(|r| r.error).collect::<Vec<_>>())?;
        d.set_item("extrapolated", study.extrapolated)?;
        d.set_item("orders", study.orders)?;
        d.set_item("order", study.order)?;
        Ok(d)
    }

    /// Jump positions of `n_traj` trajectories; reproducible per `seed`.
    #[pyo3(signature = (n_traj, seed, length, dt=None))]
    fn sample_jumps(&self, py: Python<'_>, n_traj: usize, seed: u64, length: f64, dt: Option<f64>) -> PyResult<Vec<Vec<f64>>> {
        let dt = dt.unwrap_or_else(|| trajectories::max_step(self.params()).min(0.0025));
        let cfg = SamplerConfig::new(length, dt, seed);
        let p = self.params().clone();
        let records = py
            .detach(move || Sampler::new(&p, &cfg)?.ensemble(n_traj))
            .map_err(err)?;
        Ok(records.into_iter().map(|r| r.positions).collect())
    }

    /// Jump-rate and binned g₂ estimates from sampled trajectories.
    #[pyo3(signature = (n_traj, seed, length, bin_edges, burn_in=0.0, dt=None))]
    #[allow(clippy::too_many_arguments)]
    fn trajectory_stats<'py>(
        &self,
        py: Python<'py>,
        n_traj: usize,
        seed: u64,
        length: f64,
        bin_edges: Vec<f64>,
        burn_in: f64,
        dt: Option<f64>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let dt = dt.unwrap_or_else(|| trajectories::max_step(self.params()).min(0.0025));
        let cfg = SamplerConfig::new(length, dt, seed);
        let p = self.params().clone();
        let bins = Bins::new(bin_edges).map_err(err)?;
        let stats = py
            .detach(move || {
                let sampler = Sampler::new(&p, &cfg)?;
                let records = sampler.ensemble(n_traj)?;
                trajectories::estimate_stats(&records, sampler.length(), burn_in, &bins)
            })
            .map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("rate", stats.rate)?;
        d.set_item("rate_stderr", stats.rate_stderr)?;
        d.set_item("bin_centers", stats.bins.centers())?;
        d.set_item("g2", stats.g2)?;
        d.set_item("g2_stderr", stats.g2_stderr)?;
        d.set_item("waiting", stats.waiting)?;
        d.set_item("waiting_stderr", stats.waiting_stderr)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        let geometry = match self.params().geometry() {
            Geometry::Thermodynamic => "thermodynamic".to_string(),
            Geometry::Finite { length, .. } => format!("finite(length={length})"),
        };
        format!("Params(dim={}, {geometry})", self.params().dim())
    }
}

fn study_observable(name: &str, distance: f64) -> PyResult<StudyObservable> {
    Ok(match name {
        "density" => StudyObservable::Density,
        "two_point" => StudyObservable::TwoPoint(distance),
        "pair" => StudyObservable::Pair(distance),
        "kinetic" => StudyObservable::Kinetic,
        other => return Err(PyValueError::new_err(format!("unknown observable `{other}`"))),
    })
}

/// Vectorized Liouvillian of `(K, R)` (row-stacking convention).
#[pyfunction]
fn build_liouvillian(k: Vec<Vec<Complex64>>, r: Vec<Vec<Complex64>>) -> PyResult<Vec<Vec<Complex64>>> {
    let l = liouvillian::build_liouvillian(&to_matrix(k, "K")?, &to_matrix(r, "R")?).map_err(err)?;
    Ok(from_matrix(l.matrix()))
}

/// Generator with general second-order field moments.
#[pyfunction]
fn build_general_generator(
    k: Vec<Vec<Complex64>>,
    r: Vec<Vec<Complex64>>,
    psi_dag_sq: Complex64,
    psi_sq: Complex64,
    psi_dag_psi: f64,
    psi_psi_dag: f64,
) -> PyResult<Vec<Vec<Complex64>>> {
    let m = FieldMoments::new(psi_dag_sq, psi_sq, psi_dag_psi, psi_psi_dag).map_err(err)?;
    let g = general_lindblad::build_general_generator(&to_matrix(k, "K")?, &to_matrix(r, "R")?, &m).map_err(err)?;
    Ok(from_matrix(g.matrix()))
}

/// Generator versus jump-operator form for the given moments.
#[pyfunction]
fn compare_forms<'py>(
    py: Python<'py>,
    k: Vec<Vec<Complex64>>,
    r: Vec<Vec<Complex64>>,
    psi_dag_sq: Complex64,
    psi_sq: Complex64,
    psi_dag_psi: f64,
    psi_psi_dag: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let m = FieldMoments::new(psi_dag_sq, psi_sq, psi_dag_psi, psi_psi_dag).map_err(err)?;
    let c = general_lindblad::compare_forms(&to_matrix(k, "K")?, &to_matrix(r, "R")?, &m).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("max_difference", c.max_difference)?;
    d.set_item("trace_defect_generator", c.trace_defect_generator)?;
    d.set_item("trace_defect_jump_form", c.trace_defect_jump_form)?;
    d.set_item("choi_min_generator", c.choi_min_generator)?;
    d.set_item("choi_min_jump_form", c.choi_min_jump_form)?;
    Ok(d)
}

#[pymodule]
fn cmps(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_class::<PyParams>()?;
    m.add_function(wrap_pyfunction!(build_liouvillian, m)?)?;
    m.add_function(wrap_pyfunction!(build_general_generator, m)?)?;
    m.add_function(wrap_pyfunction!(compare_forms, m)?)?;
    Ok(())
}
