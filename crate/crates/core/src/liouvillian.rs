//! The vectorized boundary Liouvillian, its steady state and spectrum, and
//! propagation of vectorized operators over distance.

use num_complex::Complex64;

use crate::error::{CmpsError, Result};
use crate::linalg::{self, kron, CMatrix, CVector, IMAG};
use crate::params::{CmpsParams, Tolerances};

/// A `D² x D²` matrix acting on row-stacked vectorized `D x D` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Superoperator {
    mat: CMatrix,
    dim: usize,
}

impl Superoperator {
    pub fn from_matrix(mat: CMatrix, dim: usize) -> Result<Self> {
        if mat.nrows() != dim * dim || mat.ncols() != dim * dim {
            return Err(CmpsError::ShapeMismatch(format!(
                "superoperator on {dim}x{dim} matrices must be {0}x{0}, got {1}x{2}",
                dim * dim,
                mat.nrows(),
                mat.ncols()
            )));
        }
        Ok(Self { mat, dim })
    }

    /// `ρ ↦ A ρ B`, i.e. `A ⊗ Bᵀ`.
    pub fn sandwich(a: &CMatrix, b: &CMatrix) -> Self {
        Self {
            mat: kron(a, &b.transpose()),
            dim: a.nrows(),
        }
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.mat
    }

    pub fn into_matrix(self) -> CMatrix {
        self.mat
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn apply(&self, v: &CVector) -> CVector {
        &self.mat * v
    }

    /// Apply to a matrix and return a matrix.
    pub fn act(&self, rho: &CMatrix) -> CMatrix {
        let v = linalg::vectorize(rho).expect("square input");
        linalg::devectorize(&(&self.mat * v)).expect("square output")
    }

    /// `exp(L dx)`.
    pub fn exp(&self, dx: f64) -> Result<CMatrix> {
        if dx < 0.0 {
            return Err(CmpsError::NegativeDistance(dx));
        }
        Ok(linalg::expm(&self.mat.map(|z| z * dx)))
    }

    /// `max_j |(⟨1| L)_j|`; zero for a trace-preserving generator.
    pub fn trace_defect(&self) -> f64 {
        let one = linalg::trace_covector(self.dim);
        linalg::max_abs_vec(&linalg::covector_mul(&one, &self.mat))
    }
}

impl std::ops::Add for &Superoperator {
    type Output = Superoperator;
    fn add(self, rhs: &Superoperator) -> Superoperator {
        Superoperator {
            mat: &self.mat + &rhs.mat,
            dim: self.dim,
        }
    }
}

/// `L = -iK⊗1 + i1⊗Kᵀ - ½(R†R⊗1 - 2R⊗R̄ + 1⊗RᵀR̄)`.
pub fn build_liouvillian(k: &CMatrix, r: &CMatrix) -> Result<Superoperator> {
    let d = k.nrows();
    if k.ncols() != d || r.nrows() != d || r.ncols() != d {
        return Err(CmpsError::ShapeMismatch(format!(
            "K is {}x{}, R is {}x{}",
            k.nrows(),
            k.ncols(),
            r.nrows(),
            r.ncols()
        )));
    }
    let eye = linalg::identity(d);
    let rdr = r.adjoint() * r;
    let unitary = kron(k, &eye).map(|z| -IMAG * z) + kron(&eye, &k.transpose()).map(|z| IMAG * z);
    let dissipative = kron(&rdr, &eye) - kron(r, &r.conjugate()).map(|z| z * 2.0)
        + kron(&eye, &(r.transpose() * r.conjugate()));
    Superoperator::from_matrix(unitary - dissipative.map(|z| z * 0.5), d)
}

pub fn liouvillian(params: &CmpsParams) -> Superoperator {
    build_liouvillian(params.k(), params.r()).expect("validated parameters")
}

/// Spectrum and fixed point of a Liouvillian.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralData {
    /// All `D²` eigenvalues, sorted by descending real part.
    pub eigenvalues: Vec<Complex64>,
    /// `-Re` of the slowest eigenvalue other than the fixed point (0 if none).
    pub gap: f64,
    pub steady_state: CMatrix,
    /// More than one eigenvalue with vanishing real part: the steady state is
    /// not unique and gap-based claims are refused.
    pub degenerate_fixed_space: bool,
    /// No decaying mode separates from the fixed point.
    pub gapless: bool,
    /// Index into `eigenvalues` of the fixed-point eigenvalue.
    pub fixed_index: usize,
}

impl SpectralData {
    pub fn zero_modes(&self, tol: f64) -> usize {
        self.eigenvalues.iter().filter(|z| z.re.abs() < tol).count()
    }
}

pub fn steady_state(l: &Superoperator) -> Result<SpectralData> {
    steady_state_with(l, &Tolerances::default())
}

pub fn steady_state_with(l: &Superoperator, tol: &Tolerances) -> Result<SpectralData> {
    let evd = linalg::eigen(l.matrix())?;
    let mut order: Vec<usize> = (0..evd.values.len()).collect();
    order.sort_by(|&a, &b| {
        evd.values[b]
            .re
            .total_cmp(&evd.values[a].re)
            .then(evd.values[a].im.total_cmp(&evd.values[b].im))
    });
    let eigenvalues: Vec<Complex64> = order.iter().map(|&i| evd.values[i]).collect();
    let smallest = evd.values.iter().map(|z| z.norm()).fold(f64::INFINITY, f64::min);
    // Among (near-)zero modes prefer the eigenvector with the largest trace,
    // so that degenerate fixed spaces still yield a density matrix.
    let trace_weight = |i: usize| {
        let col = evd.right.column(i);
        let d = l.dim();
        let tr: Complex64 = (0..d).map(|j| col[j * d + j]).sum();
        tr.norm() / col.norm()
    };
    let fixed_raw = (0..evd.values.len())
        .filter(|&i| evd.values[i].norm() <= smallest + tol.zero_eigenvalue)
        .max_by(|&a, &b| trace_weight(a).total_cmp(&trace_weight(b)))
        .expect("nonempty spectrum");
    let fixed_index = order.iter().position(|&i| i == fixed_raw).unwrap();

    let v = evd.right.column(fixed_raw).into_owned();
    let rho = linalg::devectorize(&v)?;
    let trace = rho.trace();
    if trace.norm() < 1e-12 * linalg::max_abs(&rho) {
        return Err(CmpsError::NoConvergence(
            "fixed-point eigenvector is traceless".into(),
        ));
    }
    let rho = linalg::hermitize(&rho.map(|z| z / trace));
    let residual = linalg::max_abs_vec(&l.apply(&linalg::vectorize(&rho)?));
    if residual > tol.residual {
        return Err(CmpsError::NoConvergence(format!(
            "steady-state residual {residual:.3e} exceeds {:.1e}",
            tol.residual
        )));
    }

    let zero_count = eigenvalues
        .iter()
        .filter(|z| z.re.abs() < tol.zero_eigenvalue)
        .count();
    let slowest = eigenvalues
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != fixed_index)
        .map(|(_, z)| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let gap = if slowest.is_finite() { (-slowest).max(0.0) } else { 0.0 };
    Ok(SpectralData {
        eigenvalues,
        gap,
        steady_state: rho,
        degenerate_fixed_space: zero_count > 1,
        gapless: gap < tol.zero_eigenvalue,
        fixed_index,
    })
}

/// `exp(L dx) v`; returns `v` unchanged for `dx = 0`.
pub fn propagate(l: &Superoperator, v: &CVector, dx: f64) -> Result<CVector> {
    if dx < 0.0 {
        return Err(CmpsError::NegativeDistance(dx));
    }
    if dx == 0.0 {
        return Ok(v.clone());
    }
    Ok(l.exp(dx)? * v)
}

/// Piecewise-constant `x`-dependent parameters: consecutive segments of given
/// length, each with its own `(K, R)`.
#[derive(Debug, Clone)]
pub struct PiecewiseProtocol {
    segments: Vec<(f64, Superoperator)>,
}

impl PiecewiseProtocol {
    pub fn new(segments: Vec<(f64, CMatrix, CMatrix)>) -> Result<Self> {
        if segments.is_empty() {
            return Err(CmpsError::InvalidArgument("protocol has no segments".into()));
        }
        let dim = segments[0].1.nrows();
        let segments = segments
            .into_iter()
            .map(|(length, k, r)| {
                if !(length >= 0.0) {
                    return Err(CmpsError::NegativeDistance(length));
                }
                if k.nrows() != dim {
                    return Err(CmpsError::ShapeMismatch(
                        "protocol segments differ in bond dimension".into(),
                    ));
                }
                if linalg::hermiticity_defect(&k) > 1e-12 * linalg::max_abs(&k) {
                    return Err(CmpsError::NonHermitianK {
                        defect: linalg::hermiticity_defect(&k),
                        tolerance: 1e-12 * linalg::max_abs(&k),
                    });
                }
                Ok((length, build_liouvillian(&k, &r)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { segments })
    }

    pub fn total_length(&self) -> f64 {
        self.segments.iter().map(|(l, _)| l).sum()
    }

    /// `ρ(L)` from `ρ(0)` under the composed segment propagators.
    pub fn evolve(&self, rho0: &CMatrix) -> Result<CMatrix> {
        let mut v = linalg::vectorize(rho0)?;
        for (length, l) in &self.segments {
            v = propagate(l, &v, *length)?;
        }
        linalg::devectorize(&v)
    }
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

    fn rf_k() -> CMatrix {
        CMatrix::from_row_slice(2, 2, &[ZERO, real(0.5), real(0.5), ZERO])
    }

    fn lindblad_action(k: &CMatrix, r: &CMatrix, rho: &CMatrix) -> CMatrix {
        let rdr = r.adjoint() * r;
        (k * rho - rho * k).map(|z| -IMAG * z) + r * rho * r.adjoint()
            - (&rdr * rho + rho * &rdr).map(|z| z * 0.5)
    }

    #[test]
    fn scalar_liouvillian_vanishes() {
        let k = CMatrix::from_element(1, 1, real(0.7));
        let r = CMatrix::from_element(1, 1, Complex64::new(0.4, 1.3));
        let l = build_liouvillian(&k, &r).unwrap();
        assert!(l.matrix()[(0, 0)].norm() < 1e-15);
        let s = steady_state(&l).unwrap();
        assert!((s.steady_state[(0, 0)] - real(1.0)).norm() < 1e-15);
        assert!(s.gapless);
        assert!(!s.degenerate_fixed_space);
        assert_eq!(s.gap, 0.0);
    }

    #[test]
    fn unitary_liouvillian_has_imaginary_spectrum() {
        let k = CMatrix::from_row_slice(
            2,
            2,
            &[real(1.0), Complex64::new(0.3, 0.2), Complex64::new(0.3, -0.2), real(-0.4)],
        );
        let l = build_liouvillian(&k, &CMatrix::zeros(2, 2)).unwrap();
        let eye = linalg::identity(2);
        let expected =
            kron(&k, &eye).map(|z| -IMAG * z) + kron(&eye, &k.transpose()).map(|z| IMAG * z);
        assert_eq!(l.matrix(), &expected);
        for z in linalg::eigenvalues(l.matrix()).unwrap() {
            assert!(z.re.abs() < 1e-13);
        }
        let s = steady_state(&l).unwrap();
        assert!(s.degenerate_fixed_space);
    }

    #[test]
    fn damping_spectrum_and_steady_state() {
        let l = build_liouvillian(&CMatrix::zeros(2, 2), &sigma_minus()).unwrap();
        // explicit 4x4 assembled entrywise from ρ ↦ σ⁻ρσ⁺ - ½{σ⁺σ⁻, ρ}
        let mut explicit = CMatrix::zeros(4, 4);
        explicit[(0, 0)] = real(-1.0);
        explicit[(1, 1)] = real(-0.5);
        explicit[(2, 2)] = real(-0.5);
        explicit[(3, 0)] = real(1.0);
        assert!(linalg::max_abs(&(l.matrix() - &explicit)) < 1e-15);

        let s = steady_state(&l).unwrap();
        let expected = [0.0, -0.5, -0.5, -1.0];
        for (z, e) in s.eigenvalues.iter().zip(expected) {
            assert!((z - real(e)).norm() < 1e-12, "{z} vs {e}");
        }
        assert!((s.gap - 0.5).abs() < 1e-12);
        assert!(!s.degenerate_fixed_space && !s.gapless);
        let rho_expected = CMatrix::from_row_slice(2, 2, &[ZERO, ZERO, ZERO, real(1.0)]);
        assert!(linalg::max_abs(&(&s.steady_state - rho_expected)) < 1e-12);
    }

    #[test]
    fn resonance_fluorescence_population() {
        // optical Bloch equations, resonant drive Ω = 1 and unit decay:
        // ρ_ee = (Ω²/4) / (γ²/4 + Ω²/2) = 1/3
        let s = steady_state(&build_liouvillian(&rf_k(), &sigma_minus()).unwrap()).unwrap();
        assert!((s.steady_state[(0, 0)].re - 1.0 / 3.0).abs() < 1e-12);
        // steady coherence ρ_eg = -iΩγ / (γ² + 2Ω²) = -i/3
        let coherence = s.steady_state[(0, 1)];
        assert!((coherence - Complex64::new(0.0, -1.0 / 3.0)).norm() < 1e-12);
        assert!(linalg::hermitian_eigenvalues(&s.steady_state)[0] > -1e-10);
    }

    #[test]
    fn propagate_examples() {
        let l = build_liouvillian(&CMatrix::zeros(2, 2), &sigma_minus()).unwrap();
        let v = CVector::from_vec(vec![real(1.0), ZERO, ZERO, ZERO]);
        assert_eq!(propagate(&l, &v, 0.0).unwrap(), v);
        let out = propagate(&l, &v, 2f64.ln()).unwrap();
        assert!((out[0] - real(0.5)).norm() < 1e-14);
        assert!((out[3] - real(0.5)).norm() < 1e-14);
        assert!(matches!(
            propagate(&l, &v, -1.0),
            Err(CmpsError::NegativeDistance(_))
        ));

        let scalar = build_liouvillian(
            &CMatrix::from_element(1, 1, real(2.0)),
            &CMatrix::from_element(1, 1, real(1.5)),
        )
        .unwrap();
        let w = CVector::from_element(1, Complex64::new(0.3, 0.1));
        assert!((propagate(&scalar, &w, 5.0).unwrap()[0] - w[0]).norm() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(
            build_liouvillian(&linalg::identity(2), &linalg::identity(3)),
            Err(CmpsError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn piecewise_protocol_composes_segments() {
        let damp = (2f64.ln(), CMatrix::zeros(2, 2), sigma_minus());
        let protocol = PiecewiseProtocol::new(vec![damp.clone(), damp]).unwrap();
        let rho0 = CMatrix::from_row_slice(2, 2, &[real(1.0), ZERO, ZERO, ZERO]);
        let rho = protocol.evolve(&rho0).unwrap();
        assert!((rho[(0, 0)] - real(0.25)).norm() < 1e-14);
        assert!((protocol.total_length() - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn trace_preservation(seed in any::<u64>(), dim in 2usize..=6) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(&mut rng, dim, 1.0, Geometry::Thermodynamic).unwrap();
            prop_assert!(liouvillian(&p).trace_defect() < 1e-12);
        }

        #[test]
        fn matches_entrywise_lindblad_action(seed in any::<u64>(), dim in 1usize..=5) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(&mut rng, dim, 1.0, Geometry::Thermodynamic).unwrap();
            let l = liouvillian(&p);
            let mut assembled = CMatrix::zeros(dim * dim, dim * dim);
            for a in 0..dim {
                for b in 0..dim {
                    let mut unit = CMatrix::zeros(dim, dim);
                    unit[(a, b)] = real(1.0);
                    let image = linalg::vectorize(&lindblad_action(p.k(), p.r(), &unit)).unwrap();
                    assembled.set_column(a * dim + b, &image);
                }
            }
            prop_assert!(linalg::max_abs(&(l.matrix() - assembled)) < 1e-12);
        }

        #[test]
        fn hermiticity_and_trace_preserving_evolution(seed in any::<u64>(), dim in 2usize..=4) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(&mut rng, dim, 1.0, Geometry::Thermodynamic).unwrap();
            let l = liouvillian(&p);
            let h = linalg::hermitize(&CMatrix::from_fn(dim, dim, |i, j| Complex64::new((i + 2 * j) as f64, i as f64 - j as f64)));
            let v = linalg::vectorize(&h).unwrap();
            let out = propagate(&l, &v, 1.0).unwrap();
            prop_assert!(linalg::hermiticity_defect(&linalg::devectorize(&out).unwrap()) < 1e-10);
            let one = linalg::trace_covector(dim);
            prop_assert!((linalg::pair(&one, &out) - linalg::pair(&one, &v)).norm() < 1e-10);
        }
    }
}
