//! Boundary generator for a non-vacuum meter state with second moments
//! `⟨Ψ†²⟩, ⟨Ψ²⟩, ⟨Ψ†Ψ⟩, ⟨ΨΨ†⟩`, and the four-operator jump decomposition.
//!
//! The generator is
//!
//! ```text
//! G ρ = -i[K, ρ] + ½(⟨Ψ†²⟩ [R,[R,ρ]] + ⟨Ψ²⟩ [R†,[R†,ρ]])
//!       + ⟨ΨΨ†⟩ D[R] ρ + ⟨Ψ†Ψ⟩ D[R†] ρ,
//! D[X] ρ = X ρ X† - ½{X†X, ρ},
//! ```
//!
//! which is the second-order expansion of the meter coupling and reduces to
//! the vacuum Liouvillian at moments `(0, 0, 0, 1)`.

use num_complex::Complex64;

use crate::error::{CmpsError, Result};
use crate::linalg::{self, CMatrix, IMAG};
use crate::liouvillian::{self, Superoperator};

const MOMENT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldMoments {
    pub psi_dag_sq: Complex64,
    pub psi_sq: Complex64,
    pub psi_dag_psi: f64,
    pub psi_psi_dag: f64,
}

impl FieldMoments {
    pub fn new(psi_dag_sq: Complex64, psi_sq: Complex64, psi_dag_psi: f64, psi_psi_dag: f64) -> Result<Self> {
        let m = Self {
            psi_dag_sq,
            psi_sq,
            psi_dag_psi,
            psi_psi_dag,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn vacuum() -> Self {
        Self {
            psi_dag_sq: linalg::ZERO,
            psi_sq: linalg::ZERO,
            psi_dag_psi: 0.0,
            psi_psi_dag: 1.0,
        }
    }

    /// Thermal meter with mean occupation `n̄`.
    pub fn thermal(nbar: f64) -> Result<Self> {
        Self::new(linalg::ZERO, linalg::ZERO, nbar, nbar + 1.0)
    }

    /// Squeezed-vacuum-like moments with anomalous part `m = ⟨Ψ²⟩`.
    pub fn squeezed(nbar: f64, m: Complex64) -> Result<Self> {
        Self::new(m.conj(), m, nbar, nbar + 1.0)
    }

    pub fn is_diagonal(&self) -> bool {
        self.psi_dag_sq.norm() == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.psi_dag_sq.re, self.psi_dag_sq.im, self.psi_sq.re, self.psi_sq.im, self.psi_dag_psi, self.psi_psi_dag]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(CmpsError::InvalidMoments("moments must be finite".into()));
        }
        if (self.psi_sq - self.psi_dag_sq.conj()).norm() > MOMENT_TOL {
            return Err(CmpsError::InvalidMoments(format!(
                "⟨Ψ²⟩ = {} is not the conjugate of ⟨Ψ†²⟩ = {}",
                self.psi_sq, self.psi_dag_sq
            )));
        }
        if self.psi_dag_psi < 0.0 {
            return Err(CmpsError::InvalidMoments(format!(
                "⟨Ψ†Ψ⟩ = {} is negative",
                self.psi_dag_psi
            )));
        }
        if (self.psi_psi_dag - self.psi_dag_psi - 1.0).abs() > MOMENT_TOL {
            return Err(CmpsError::InvalidMoments(format!(
                "⟨ΨΨ†⟩ - ⟨Ψ†Ψ⟩ = {}, expected 1",
                self.psi_psi_dag - self.psi_dag_psi
            )));
        }
        let lhs = self.psi_dag_sq.norm_sqr();
        let rhs = self.psi_dag_psi * self.psi_psi_dag;
        if lhs > rhs * (1.0 + MOMENT_TOL) + MOMENT_TOL {
            return Err(CmpsError::InvalidMoments(format!(
                "|⟨Ψ†²⟩|² = {lhs} exceeds ⟨Ψ†Ψ⟩⟨ΨΨ†⟩ = {rhs}"
            )));
        }
        Ok(())
    }
}

/// The four jump operators `M₁..M₄`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpSet {
    pub m: [CMatrix; 4],
}

/// Diagnostics of [`compare_forms`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FormComparison {
    /// `max |G - G_M|` entrywise.
    pub max_difference: f64,
    pub trace_defect_generator: f64,
    pub trace_defect_jump_form: f64,
    /// Minimum eigenvalue of the Choi matrix of `exp(0.1 G)`.
    pub choi_min_generator: f64,
    pub choi_min_jump_form: f64,
}

/// Superoperator of `ρ ↦ [X, [X, ρ]]`.
fn double_commutator(x: &CMatrix) -> CMatrix {
    let eye = linalg::identity(x.nrows());
    let x2 = x * x;
    linalg::kron(&x2, &eye) - linalg::kron(x, &x.transpose()).map(|z| z * 2.0)
        + linalg::kron(&eye, &x2.transpose())
}

/// Superoperator of `D[X] ρ = XρX† - ½{X†X, ρ}`.
fn dissipator(x: &CMatrix) -> CMatrix {
    let eye = linalg::identity(x.nrows());
    let xdx = x.adjoint() * x;
    linalg::kron(x, &x.conjugate())
        - (linalg::kron(&xdx, &eye) + linalg::kron(&eye, &xdx.transpose())).map(|z| z * 0.5)
}

fn unitary_part(k: &CMatrix) -> CMatrix {
    let eye = linalg::identity(k.nrows());
    linalg::kron(k, &eye).map(|z| -IMAG * z) + linalg::kron(&eye, &k.transpose()).map(|z| IMAG * z)
}

fn check_square(k: &CMatrix, r: &CMatrix) -> Result<usize> {
    let d = k.nrows();
    if k.ncols() != d || r.nrows() != d || r.ncols() != d {
        return Err(CmpsError::ShapeMismatch(format!(
            "K is {}x{} and R is {}x{}",
            k.nrows(),
            k.ncols(),
            r.nrows(),
            r.ncols()
        )));
    }
    Ok(d)
}

pub fn build_general_generator(k: &CMatrix, r: &CMatrix, moments: &FieldMoments) -> Result<Superoperator> {
    moments.validate()?;
    let d = check_square(k, r)?;
    let rd = r.adjoint();
    let g = unitary_part(k)
        + (double_commutator(r).map(|z| z * moments.psi_dag_sq)
            + double_commutator(&rd).map(|z| z * moments.psi_sq))
        .map(|z| z * 0.5)
        + dissipator(r).map(|z| z * moments.psi_psi_dag)
        + dissipator(&rd).map(|z| z * moments.psi_dag_psi);
    Superoperator::from_matrix(g, d)
}

/// `M₁ = iaR - bR†, M₂ = iaR + bR†, M₃ = cR†, M₄ = dR` with principal roots
/// `a = √(⟨Ψ†²⟩/2), b = √(⟨Ψ²⟩/2), c = √⟨Ψ†Ψ⟩, d = √⟨ΨΨ†⟩`.
pub fn jump_decomposition(r: &CMatrix, moments: &FieldMoments) -> Result<JumpSet> {
    moments.validate()?;
    if r.nrows() != r.ncols() {
        return Err(CmpsError::ShapeMismatch(format!(
            "R is {}x{}",
            r.nrows(),
            r.ncols()
        )));
    }
    let a = (moments.psi_dag_sq / 2.0).sqrt();
    let b = (moments.psi_sq / 2.0).sqrt();
    let c = moments.psi_dag_psi.sqrt();
    let d = moments.psi_psi_dag.sqrt();
    let rd = r.adjoint();
    let ia = IMAG * a;
    Ok(JumpSet {
        m: [
            r.map(|z| ia * z) - rd.map(|z| b * z),
            r.map(|z| ia * z) + rd.map(|z| b * z),
            rd.map(|z| z * c),
            r.map(|z| z * d),
        ],
    })
}

/// Lindblad generator `-i[K,ρ] + Σ_j D[M_j] ρ`.
pub fn jump_form_generator(k: &CMatrix, jumps: &JumpSet) -> Result<Superoperator> {
    let d = k.nrows();
    let mut g = unitary_part(k);
    for m in &jumps.m {
        check_square(k, m)?;
        g += dissipator(m);
    }
    Superoperator::from_matrix(g, d)
}

fn choi_min(g: &Superoperator, dx: f64) -> Result<f64> {
    let choi = linalg::choi_matrix(&g.exp(dx)?, g.dim());
    Ok(linalg::hermitian_eigenvalues(&linalg::hermitize(&choi))[0])
}

pub fn compare_forms(k: &CMatrix, r: &CMatrix, moments: &FieldMoments) -> Result<FormComparison> {
    let g = build_general_generator(k, r, moments)?;
    let gm = jump_form_generator(k, &jump_decomposition(r, moments)?)?;
    Ok(FormComparison {
        max_difference: linalg::max_abs(&(g.matrix() - gm.matrix())),
        trace_defect_generator: g.trace_defect(),
        trace_defect_jump_form: gm.trace_defect(),
        choi_min_generator: choi_min(&g, 0.1)?,
        choi_min_jump_form: choi_min(&gm, 0.1)?,
    })
}

/// Vacuum-moment generator, for comparison with the Liouvillian module.
pub fn vacuum_generator(k: &CMatrix, r: &CMatrix) -> Result<Superoperator> {
    build_general_generator(k, r, &FieldMoments::vacuum())
}

#[doc(hidden)]
pub fn liouvillian_difference(k: &CMatrix, r: &CMatrix) -> Result<f64> {
    let g = vacuum_generator(k, r)?;
    let l = liouvillian::build_liouvillian(k, r)?;
    Ok(linalg::max_abs(&(g.matrix() - l.matrix())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{real, ZERO};
    use crate::params::{random_params, Geometry};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn sigma_minus() -> CMatrix {
        CMatrix::from_row_slice(2, 2, &[ZERO, ZERO, real(1.0), ZERO])
    }

    fn random_kr(seed: u64, dim: usize) -> (CMatrix, CMatrix) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let p = random_params(&mut rng, dim, 1.0, Geometry::Thermodynamic).unwrap();
        (p.k().clone(), p.r().clone())
    }

    /// Action on a matrix, written out without vectorization.
    fn thermal_damping_by_hand(rho: &CMatrix, nbar: f64) -> CMatrix {
        let sm = sigma_minus();
        let sp = sm.adjoint();
        let d = |x: &CMatrix| {
            x * rho * x.adjoint()
                - (x.adjoint() * x * rho + rho * x.adjoint() * x).map(|z| z * 0.5)
        };
        d(&sm).map(|z| z * (nbar + 1.0)) + d(&sp).map(|z| z * nbar)
    }

    #[test]
    fn moment_validation() {
        assert!(FieldMoments::new(ZERO, ZERO, 0.0, 1.0).is_ok());
        assert!(matches!(
            FieldMoments::new(real(0.1), real(0.2), 1.0, 2.0),
            Err(CmpsError::InvalidMoments(_))
        ));
        assert!(matches!(
            FieldMoments::new(ZERO, ZERO, 1.0, 1.0),
            Err(CmpsError::InvalidMoments(_))
        ));
        assert!(matches!(
            FieldMoments::new(ZERO, ZERO, -0.5, 0.5),
            Err(CmpsError::InvalidMoments(_))
        ));
        assert!(matches!(
            FieldMoments::squeezed(0.1, real(1.0)),
            Err(CmpsError::InvalidMoments(_))
        ));
    }

    #[test]
    fn zero_r_is_pure_commutator() {
        let (k, _) = random_kr(3, 3);
        let r = CMatrix::zeros(3, 3);
        let m = FieldMoments::squeezed(0.4, Complex64::new(0.2, 0.3)).unwrap();
        let g = build_general_generator(&k, &r, &m).unwrap();
        assert!(linalg::max_abs(&(g.matrix() - unitary_part(&k))) < 1e-15);
    }

    #[test]
    fn thermal_damping_matches_hand_assembly() {
        let nbar = 0.7;
        let g = build_general_generator(
            &CMatrix::zeros(2, 2),
            &sigma_minus(),
            &FieldMoments::thermal(nbar).unwrap(),
        )
        .unwrap();
        for j in 0..4 {
            let mut unit = CMatrix::zeros(2, 2);
            unit[(j / 2, j % 2)] = real(1.0);
            let expected = thermal_damping_by_hand(&unit, nbar);
            assert!(linalg::max_abs(&(g.act(&unit) - expected)) < 1e-14);
        }
    }

    #[test]
    fn jump_decomposition_examples() {
        let (_, r) = random_kr(5, 3);
        let vac = jump_decomposition(&r, &FieldMoments::vacuum()).unwrap();
        for m in &vac.m[..3] {
            assert_eq!(linalg::max_abs(m), 0.0);
        }
        assert!(linalg::max_abs(&(&vac.m[3] - &r)) < 1e-15);

        let js = jump_decomposition(&r, &FieldMoments::new(ZERO, ZERO, 1.0, 2.0).unwrap()).unwrap();
        assert_eq!(linalg::max_abs(&js.m[0]), 0.0);
        assert_eq!(linalg::max_abs(&js.m[1]), 0.0);
        assert!(linalg::max_abs(&(&js.m[2] - r.adjoint())) < 1e-15);
        assert!(linalg::max_abs(&(&js.m[3] - r.map(|z| z * 2f64.sqrt()))) < 1e-15);
    }

    #[test]
    fn anomalous_moments_give_finite_discrepancy() {
        let (k, r) = random_kr(11, 3);
        let m = FieldMoments::squeezed(0.5, Complex64::new(0.3, 0.1)).unwrap();
        let cmp = compare_forms(&k, &r, &m).unwrap();
        assert!(cmp.max_difference > 1e-6);
        assert!(cmp.trace_defect_generator < 1e-12);
        assert!(cmp.trace_defect_jump_form < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn vacuum_reduction(seed in any::<u64>(), dim in 2usize..=5) {
            let (k, r) = random_kr(seed, dim);
            prop_assert!(liouvillian_difference(&k, &r).unwrap() < 1e-12);
        }

        #[test]
        fn trace_preserved_for_valid_moments(
            seed in any::<u64>(),
            nbar in 0.0f64..3.0,
            frac in 0.0f64..1.0,
            phase in 0.0f64..std::f64::consts::TAU,
        ) {
            let (k, r) = random_kr(seed, 3);
            let amp = frac * (nbar * (nbar + 1.0)).sqrt();
            let m = FieldMoments::squeezed(nbar, Complex64::from_polar(amp, phase)).unwrap();
            let g = build_general_generator(&k, &r, &m).unwrap();
            prop_assert!(g.trace_defect() < 1e-12);
        }

        #[test]
        fn diagonal_moments_agree_and_are_cp(seed in any::<u64>(), nbar in 0.0f64..3.0) {
            let (k, r) = random_kr(seed, 3);
            let cmp = compare_forms(&k, &r, &FieldMoments::thermal(nbar).unwrap()).unwrap();
            prop_assert!(cmp.max_difference < 1e-12);
            prop_assert!(cmp.choi_min_generator > -1e-9);
        }
    }
}
