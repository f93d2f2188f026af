//! The cMPS parameter set `(D, K, R, geometry)` and the no-jump generator
//! `Q = -iK - ½R†R`.
//!
//! Units: `R` carries dimension length^{-1/2} and `K` inverse length, so
//! that all rates are per unit length and the density `⟨Ψ†Ψ⟩` is an
//! inverse length.

use rand::Rng;

use crate::error::{CmpsError, Result};
use crate::linalg::{self, CMatrix, IMAG};

/// Numerical thresholds used across the crate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Relative Hermiticity defect allowed for `K`.
    pub hermiticity: f64,
    /// Hermiticity, positivity and trace defect allowed for boundary states.
    pub state: f64,
    /// Eigenvalues with `|Re λ|` below this count as part of the fixed space.
    pub zero_eigenvalue: f64,
    /// Maximum residual `‖L ρ_ss‖_max` accepted for a steady state.
    pub residual: f64,
    /// Correlator magnitudes below this are excluded from decay fits.
    pub signal_floor: f64,
    /// Maximum eigen-residual accepted for lattice fixed points.
    pub fixed_point: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            hermiticity: 1e-12,
            state: 1e-12,
            zero_eigenvalue: 1e-10,
            residual: 1e-10,
            signal_floor: 1e-13,
            fixed_point: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    /// Infinite line; expectations are taken in the Liouvillian steady state.
    Thermodynamic,
    /// Interval `[0, length]` with boundary state `ρ(0) = boundary_rho`.
    Finite { length: f64, boundary_rho: CMatrix },
}

impl Geometry {
    pub fn is_thermodynamic(&self) -> bool {
        matches!(self, Geometry::Thermodynamic)
    }
}

/// Validated cMPS parameters. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CmpsParams {
    dim: usize,
    k: CMatrix,
    r: CMatrix,
    geometry: Geometry,
    tolerances: Tolerances,
}

/// `Q = -iK - ½R†R`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorQ {
    pub q: CMatrix,
}

impl CmpsParams {
    pub fn new(dim: usize, k: CMatrix, r: CMatrix, geometry: Geometry) -> Result<Self> {
        Self::with_tolerances(dim, k, r, geometry, Tolerances::default())
    }

    pub fn with_tolerances(
        dim: usize,
        k: CMatrix,
        r: CMatrix,
        geometry: Geometry,
        tolerances: Tolerances,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(CmpsError::ShapeMismatch("bond dimension must be at least 1".into()));
        }
        check_shape("K", &k, dim)?;
        check_shape("R", &r, dim)?;
        let defect = linalg::hermiticity_defect(&k);
        let allowed = tolerances.hermiticity * linalg::max_abs(&k);
        if defect > allowed {
            return Err(CmpsError::NonHermitianK {
                defect,
                tolerance: allowed,
            });
        }
        if let Geometry::Finite {
            length,
            boundary_rho,
        } = &geometry
        {
            if !(length.is_finite() && *length > 0.0) {
                return Err(CmpsError::InvalidArgument(format!(
                    "finite geometry needs a positive length, got {length}"
                )));
            }
            check_shape("boundary_rho", boundary_rho, dim)
                .map_err(|e| CmpsError::InvalidBoundaryState(e.to_string()))?;
            validate_density_matrix(boundary_rho, tolerances.state)?;
        }
        Ok(Self {
            dim,
            k,
            r,
            geometry,
            tolerances,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> &CMatrix {
        &self.k
    }

    pub fn r(&self) -> &CMatrix {
        &self.r
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn tolerances(&self) -> &Tolerances {
        &self.tolerances
    }

    /// Same matrices, different geometry.
    pub fn with_geometry(&self, geometry: Geometry) -> Result<Self> {
        Self::with_tolerances(self.dim, self.k.clone(), self.r.clone(), geometry, self.tolerances)
    }

    /// Parameters `(K + t dK, R + t dR)` of a one-parameter family.
    pub fn perturbed(&self, dk: &CMatrix, dr: &CMatrix, t: f64) -> Result<Self> {
        check_shape("dK", dk, self.dim)?;
        check_shape("dR", dr, self.dim)?;
        let k = &self.k + dk.map(|z| z * t);
        let r = &self.r + dr.map(|z| z * t);
        Self::with_tolerances(self.dim, k, r, self.geometry.clone(), self.tolerances)
    }

    pub fn q(&self) -> CMatrix {
        q_matrix(self).q
    }
}

pub fn q_matrix(params: &CmpsParams) -> GeneratorQ {
    GeneratorQ {
        q: q_from(&params.k, &params.r),
    }
}

pub(crate) fn q_from(k: &CMatrix, r: &CMatrix) -> CMatrix {
    k.map(|z| -IMAG * z) - (r.adjoint() * r).map(|z| z * 0.5)
}

fn check_shape(name: &str, m: &CMatrix, dim: usize) -> Result<()> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(CmpsError::ShapeMismatch(format!(
            "{name} is {}x{}, expected {dim}x{dim}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// Hermitian, positive semidefinite and unit trace within `tol`.
pub fn validate_density_matrix(rho: &CMatrix, tol: f64) -> Result<()> {
    let herm = linalg::hermiticity_defect(rho);
    if herm > tol {
        return Err(CmpsError::InvalidBoundaryState(format!(
            "not Hermitian (defect {herm:.3e})"
        )));
    }
    let trace = rho.trace();
    if (trace - linalg::ONE).norm() > tol {
        return Err(CmpsError::InvalidBoundaryState(format!(
            "trace is {trace}, expected 1"
        )));
    }
    let min_eig = linalg::hermitian_eigenvalues(rho)[0];
    if min_eig < -tol {
        return Err(CmpsError::InvalidBoundaryState(format!(
            "not positive semidefinite (min eigenvalue {min_eig:.3e})"
        )));
    }
    Ok(())
}

/// Random instance: `K` Hermitian and `R` with i.i.d. complex Gaussian-like
/// entries (uniform on `[-scale, scale]` per component).
pub fn random_params<G: Rng>(
    rng: &mut G,
    dim: usize,
    scale: f64,
    geometry: Geometry,
) -> Result<CmpsParams> {
    let mut draw = || {
        num_complex::Complex64::new(
            scale * (2.0 * rng.random::<f64>() - 1.0),
            scale * (2.0 * rng.random::<f64>() - 1.0),
        )
    };
    let a = CMatrix::from_fn(dim, dim, |_, _| draw());
    let r = CMatrix::from_fn(dim, dim, |_, _| draw());
    CmpsParams::new(dim, linalg::hermitize(&a), r, geometry)
}
