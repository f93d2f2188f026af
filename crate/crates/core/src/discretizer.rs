//! Finite-ε lattice realization of a cMPS: site tensors `A⁰ = 1 + εQ`,
//! `A¹ = √ε R` (and optionally `A² = ε R²/√2`), their transfer matrix
//! `E = Σ Aⁿ ⊗ Āⁿ`, and lattice correlators obtained by exact contraction.
//!
//! Site `r` sits at `x = rε`. Site superoperators act on vectorized boundary
//! states and later sites multiply on the left, mirroring the continuum
//! insertion order. Nothing here calls into the Liouvillian or correlator
//! code, so agreement between the two is a genuine cross-check.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{CmpsError, Result};
use crate::linalg::{self, CMatrix, CVector};
use crate::params::{CmpsParams, Geometry};

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeTensors {
    pub eps: f64,
    pub order: usize,
    /// `A⁰, A¹[, A²]`.
    pub a: Vec<CMatrix>,
    pub geometry: Geometry,
}

impl LatticeTensors {
    pub fn dim(&self) -> usize {
        self.a[0].nrows()
    }

    /// Number of sites `N = L/ε` in finite geometry.
    pub fn sites(&self) -> Option<usize> {
        match &self.geometry {
            Geometry::Thermodynamic => None,
            Geometry::Finite { length, .. } => Some(((length / self.eps).round() as usize).max(1)),
        }
    }

    /// `Σ_n w(n) Aⁿ ⊗ Āⁿ⁺ˢ` for a bra/ket occupation shift `s`.
    fn site_superop(&self, shift: isize, weight: impl Fn(usize) -> f64) -> CMatrix {
        let d = self.dim();
        let mut out = CMatrix::zeros(d * d, d * d);
        for (n, an) in self.a.iter().enumerate() {
            let m = n as isize + shift;
            if m < 0 || m as usize >= self.a.len() {
                continue;
            }
            let w = weight(n);
            if w != 0.0 {
                out += linalg::kron(an, &self.a[m as usize].conjugate()).map(|z| z * w);
            }
        }
        out
    }

    pub fn transfer(&self) -> CMatrix {
        self.site_superop(0, |_| 1.0)
    }

    /// `a†a` on one site.
    pub fn occupation(&self) -> CMatrix {
        self.site_superop(0, |n| n as f64)
    }

    /// `a` on one site.
    pub fn annihilation(&self) -> CMatrix {
        self.site_superop(-1, |n| (n as f64).sqrt())
    }

    /// `a†` on one site.
    pub fn creation(&self) -> CMatrix {
        self.site_superop(1, |n| (n as f64 + 1.0).sqrt())
    }

    /// `a†²a²` on one site.
    pub fn same_site_pair(&self) -> CMatrix {
        self.site_superop(0, |n| (n * n.saturating_sub(1)) as f64)
    }
}

pub fn lattice_tensors(params: &CmpsParams, eps: f64, order: usize) -> Result<LatticeTensors> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(CmpsError::StepNotPositive(eps));
    }
    if !(1..=2).contains(&order) {
        return Err(CmpsError::InvalidArgument(format!(
            "tensor order must be 1 or 2, got {order}"
        )));
    }
    let d = params.dim();
    let r = params.r();
    let mut a = vec![
        linalg::identity(d) + params.q().map(|z| z * eps),
        r.map(|z| z * eps.sqrt()),
    ];
    if order == 2 {
        a.push((r * r).map(|z| z * (eps / 2f64.sqrt())));
    }
    Ok(LatticeTensors {
        eps,
        order,
        a,
        geometry: params.geometry().clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    pub e: CMatrix,
    pub eps: f64,
}

pub fn transfer_matrix(tensors: &LatticeTensors) -> TransferMatrix {
    TransferMatrix {
        e: tensors.transfer(),
        eps: tensors.eps,
    }
}

impl TransferMatrix {
    /// `max |E - 1 - εL|` against a supplied generator.
    pub fn defect(&self, l: &CMatrix) -> f64 {
        let n = self.e.nrows();
        linalg::max_abs(&(&self.e - linalg::identity(n) - l.map(|z| z * self.eps)))
    }

    /// `max |⟨1|E - ⟨1||`, the per-site trace defect.
    pub fn trace_defect(&self) -> f64 {
        let d = (self.e.nrows() as f64).sqrt().round() as usize;
        let tr = linalg::trace_covector(d);
        linalg::max_abs_vec(&(linalg::covector_mul(&tr, &self.e) - &tr))
    }
}

/// Continuum-normalized lattice observables. Distances are in sites.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LatticeObservable {
    /// `⟨a†a⟩/ε` at site 0.
    Occupation,
    /// `⟨a†_0 a_m⟩/ε`.
    Hopping { distance: usize },
    /// `⟨a†_0 a†_m a_m a_0⟩/ε²`; same-site `⟨a†²a²⟩/ε²` at `m = 0`.
    Pair { distance: usize },
    /// `⟨(a_1 - a_0)†(a_1 - a_0)⟩/ε³`, the forward-difference kinetic density.
    KineticDifference,
}

impl LatticeObservable {
    pub fn hopping_at(d: f64, eps: f64) -> Self {
        LatticeObservable::Hopping {
            distance: (d / eps).round() as usize,
        }
    }

    pub fn pair_at(d: f64, eps: f64) -> Self {
        LatticeObservable::Pair {
            distance: (d / eps).round() as usize,
        }
    }
}

/// Boundary fixed points used to close lattice contractions.
struct Closure {
    start: CVector,
    /// `E/λ` in the thermodynamic limit, `E` otherwise.
    e: CMatrix,
    end: Option<usize>,
    norm: Complex64,
    left: CVector,
    /// Weight of a replaced site: `1/λ` on the line, 1 on a finite chain.
    site_scale: Complex64,
}

fn closure(tensors: &LatticeTensors, tol: f64) -> Result<Closure> {
    let e = tensors.transfer();
    let d = tensors.dim();
    match &tensors.geometry {
        Geometry::Thermodynamic => {
            let evd = linalg::eigen(&e)?;
            let k = (0..evd.values.len())
                .max_by(|&a, &b| {
                    evd.values[a]
                        .norm()
                        .total_cmp(&evd.values[b].norm())
                        .then(evd.values[a].re.total_cmp(&evd.values[b].re))
                })
                .expect("nonempty spectrum");
            let lambda = evd.values[k];
            let right = evd.right.column(k).into_owned();
            let left = evd.left.row(k).transpose();
            let scale = linalg::pair(&left, &right);
            let right = right / scale;
            let residual = linalg::max_abs_vec(&(&e * &right - &right * lambda))
                .max(linalg::max_abs_vec(&(linalg::covector_mul(&left, &e) - &left * lambda)));
            let size = linalg::max_abs_vec(&right) * linalg::max_abs_vec(&left);
            if residual > tol * size.max(1.0) {
                return Err(CmpsError::WindowTooSmall(residual));
            }
            Ok(Closure {
                start: right,
                e: e.map(|z| z / lambda),
                end: None,
                norm: linalg::ONE,
                left,
                site_scale: lambda.inv(),
            })
        }
        Geometry::Finite { boundary_rho, .. } => {
            let n = tensors.sites().expect("finite geometry");
            let start = linalg::vectorize(boundary_rho)?;
            let tr = linalg::trace_covector(d);
            let mut v = start.clone();
            for _ in 0..n {
                v = &e * v;
            }
            let norm = linalg::pair(&tr, &v);
            Ok(Closure {
                start,
                e,
                end: Some(n),
                norm,
                left: tr,
                site_scale: linalg::ONE,
            })
        }
    }
}

impl Closure {
    /// Contract site operators at ascending sites (at most one per site),
    /// every other site carrying `E`.
    fn contract(&self, ops: &[(usize, &CMatrix)], scale: Complex64) -> Result<Complex64> {
        let mut v = self.start.clone();
        let mut site = 0usize;
        for (s, op) in ops {
            if *s < site {
                return Err(CmpsError::UnsortedPositions);
            }
            if let Some(n) = self.end {
                if *s >= n {
                    return Err(CmpsError::PositionOutOfRange {
                        position: *s as f64,
                        length: n as f64,
                    });
                }
            }
            for _ in site..*s {
                v = &self.e * v;
            }
            v = (*op * v) * scale;
            site = s + 1;
        }
        if let Some(n) = self.end {
            for _ in site..n {
                v = &self.e * v;
            }
        }
        Ok(linalg::pair(&self.left, &v) / self.norm)
    }
}

/// Lattice expectation values, rescaled to continuum densities.
pub fn lattice_correlators(
    tensors: &LatticeTensors,
    observables: &[LatticeObservable],
    fixed_point_tol: f64,
) -> Result<Vec<Complex64>> {
    let cl = closure(tensors, fixed_point_tol)?;
    let occ = tensors.occupation();
    let ann = tensors.annihilation();
    let cre = tensors.creation();
    let pair = tensors.same_site_pair();
    let scale = cl.site_scale;
    let eps = tensors.eps;
    observables
        .par_iter()
        .map(|obs| match *obs {
            LatticeObservable::Occupation => Ok(cl.contract(&[(0, &occ)], scale)? / eps),
            LatticeObservable::Hopping { distance: 0 } => Ok(cl.contract(&[(0, &occ)], scale)? / eps),
            LatticeObservable::Hopping { distance } => {
                Ok(cl.contract(&[(0, &cre), (distance, &ann)], scale)? / eps)
            }
            LatticeObservable::Pair { distance: 0 } => {
                Ok(cl.contract(&[(0, &pair)], scale)? / (eps * eps))
            }
            LatticeObservable::Pair { distance } => {
                Ok(cl.contract(&[(0, &occ), (distance, &occ)], scale)? / (eps * eps))
            }
            LatticeObservable::KineticDifference => {
                let n0 = cl.contract(&[(0, &occ)], scale)?;
                let n1 = cl.contract(&[(1, &occ)], scale)?;
                let forward = cl.contract(&[(0, &cre), (1, &ann)], scale)?;
                let backward = cl.contract(&[(0, &ann), (1, &cre)], scale)?;
                Ok((n0 + n1 - forward - backward) / eps.powi(3))
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    pub eps: f64,
    pub value: Complex64,
    /// `|value - extrapolated|`.
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceStudy {
    pub rows: Vec<ConvergenceRow>,
    /// Linear Richardson extrapolation of the two finest points.
    pub extrapolated: Complex64,
    /// `log(err_i/err_{i+1}) / log(ε_i/ε_{i+1})` over consecutive rows whose
    /// errors are both above round-off.
    pub orders: Vec<f64>,
    pub order: f64,
}

/// The observable of a convergence study, with continuum distances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StudyObservable {
    Density,
    TwoPoint(f64),
    Pair(f64),
    Kinetic,
}

impl StudyObservable {
    fn at(self, eps: f64) -> LatticeObservable {
        match self {
            StudyObservable::Density => LatticeObservable::Occupation,
            StudyObservable::TwoPoint(d) => LatticeObservable::hopping_at(d, eps),
            StudyObservable::Pair(d) => LatticeObservable::pair_at(d, eps),
            StudyObservable::Kinetic => LatticeObservable::KineticDifference,
        }
    }
}

pub fn lattice_value(params: &CmpsParams, observable: StudyObservable, eps: f64, order: usize) -> Result<Complex64> {
    let t = lattice_tensors(params, eps, order)?;
    Ok(lattice_correlators(&t, &[observable.at(eps)], params.tolerances().fixed_point)?[0])
}

pub fn convergence_study(
    params: &CmpsParams,
    observable: StudyObservable,
    eps_list: &[f64],
    order: usize,
) -> Result<ConvergenceStudy> {
    if eps_list.len() < 3 {
        return Err(CmpsError::InvalidArgument(format!(
            "convergence study needs at least 3 step sizes, got {}",
            eps_list.len()
        )));
    }
    if eps_list.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(CmpsError::InvalidArgument("step sizes must be strictly decreasing".into()));
    }
    let values = eps_list
        .par_iter()
        .map(|&eps| lattice_value(params, observable, eps, order))
        .collect::<Result<Vec<_>>>()?;
    let n = eps_list.len();
    let (ea, eb) = (eps_list[n - 2], eps_list[n - 1]);
    let (va, vb) = (values[n - 2], values[n - 1]);
    let extrapolated = (va * eb - vb * ea) / (eb - ea);
    let rows: Vec<ConvergenceRow> = eps_list
        .iter()
        .zip(&values)
        .map(|(&eps, &value)| ConvergenceRow {
            eps,
            value,
            error: (value - extrapolated).norm(),
        })
        .collect();
    let floor = 1e-13 * extrapolated.norm().max(1e-300);
    let orders: Vec<f64> = rows
        .windows(2)
        .filter(|w| w[0].error > floor && w[1].error > floor)
        .map(|w| (w[0].error / w[1].error).ln() / (w[0].eps / w[1].eps).ln())
        .collect();
    let order = orders.first().copied().unwrap_or(f64::NAN);
    Ok(ConvergenceStudy {
        rows,
        extrapolated,
        orders,
        order,
    })
}
