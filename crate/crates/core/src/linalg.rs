//! Dense complex linear algebra shared by every module: the row-stacking
//! vectorization, Kronecker products, the scaling-and-squaring matrix
//! exponential and eigendecompositions.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{CmpsError, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

pub const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub const ONE: Complex64 = Complex64::new(1.0, 0.0);
pub const IMAG: Complex64 = Complex64::new(0.0, 1.0);

#[inline]
pub fn real(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

pub fn identity(n: usize) -> CMatrix {
    CMatrix::identity(n, n)
}

pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

pub fn commutator(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a * b - b * a
}

/// Largest entry modulus.
pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
}

pub fn max_abs_vec(v: &CVector) -> f64 {
    v.iter().fold(0.0, |acc, z| acc.max(z.norm()))
}

pub fn hermiticity_defect(m: &CMatrix) -> f64 {
    max_abs(&(m - m.adjoint()))
}

pub fn hermitize(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()).map(|z| z * 0.5)
}

/// Row-stacking vectorization: entry `m[(j, k)]` lands at index `j * D + k`,
/// so that `vec(A ρ B) = (A ⊗ Bᵀ) vec(ρ)`.
pub fn vectorize(m: &CMatrix) -> Result<CVector> {
    if m.nrows() != m.ncols() {
        return Err(CmpsError::ShapeMismatch(format!(
            "vectorize expects a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let d = m.nrows();
    Ok(CVector::from_fn(d * d, |idx, _| m[(idx / d, idx % d)]))
}

pub fn devectorize(v: &CVector) -> Result<CMatrix> {
    let d = (v.len() as f64).sqrt().round() as usize;
    if d * d != v.len() {
        return Err(CmpsError::ShapeMismatch(format!(
            "vector of length {} is not a vectorized square matrix",
            v.len()
        )));
    }
    Ok(CMatrix::from_fn(d, d, |j, k| v[j * d + k]))
}

/// `⟨1|`: the vectorized identity, used as the trace functional
/// `tr(ρ) = Σ_j v_j · vec(ρ)_j` (bilinear, no conjugation).
pub fn trace_covector(dim: usize) -> CVector {
    CVector::from_fn(dim * dim, |idx, _| if idx / dim == idx % dim { ONE } else { ZERO })
}

/// Bilinear pairing `Σ a_i b_i`.
pub fn pair(a: &CVector, b: &CVector) -> Complex64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `aᵀ M` for a row covector `a`.
pub fn covector_mul(a: &CVector, m: &CMatrix) -> CVector {
    m.tr_mul(a)
}

fn one_norm(m: &CMatrix) -> f64 {
    m.column_iter()
        .map(|col| col.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

// Padé(13) coefficients b_0..b_13.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

/// Matrix exponential by scaling and squaring with a Padé(13) approximant.
pub fn expm(a: &CMatrix) -> CMatrix {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm needs a square matrix");
    if n == 0 {
        return CMatrix::zeros(0, 0);
    }
    if n == 1 {
        return CMatrix::from_element(1, 1, a[(0, 0)].exp());
    }
    let norm = one_norm(a);
    if norm == 0.0 {
        return identity(n);
    }
    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scaled = a.map(|z| z / 2f64.powi(squarings));
    let eye = identity(n);
    let a2 = &scaled * &scaled;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = |k: usize| real(PADE13[k]);

    let inner_u = &a6 * b(13) + &a4 * b(11) + &a2 * b(9);
    let u = &scaled
        * (&a6 * inner_u + &a6 * b(7) + &a4 * b(5) + &a2 * b(3) + &eye * b(1));
    let inner_v = &a6 * b(12) + &a4 * b(10) + &a2 * b(8);
    let v = &a6 * inner_v + &a6 * b(6) + &a4 * b(4) + &a2 * b(2) + &eye * b(0);

    let mut result = (&v - &u)
        .lu()
        .solve(&(&v + &u))
        .expect("Padé denominator is nonsingular for scaled arguments");
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Full eigendecomposition of a general complex matrix.
pub struct Eigen {
    pub values: Vec<Complex64>,
    /// Right eigenvectors as columns.
    pub right: CMatrix,
    /// Left eigenvectors as rows, normalized so that `left * right = 1`.
    pub left: CMatrix,
}

pub fn eigenvalues(a: &CMatrix) -> Result<Vec<Complex64>> {
    let m = to_faer(a);
    m.eigenvalues()
        .map_err(|e| CmpsError::NoConvergence(format!("eigenvalue solver failed: {e:?}")))
}

pub fn eigen(a: &CMatrix) -> Result<Eigen> {
    let n = a.nrows();
    let m = to_faer(a);
    let evd = m
        .eigen()
        .map_err(|e| CmpsError::NoConvergence(format!("eigendecomposition failed: {e:?}")))?;
    let u = evd.U();
    let s = evd.S().column_vector();
    let values: Vec<Complex64> = (0..n).map(|i| s[i]).collect();
    let right = CMatrix::from_fn(n, n, |i, j| u[(i, j)]);
    let left = right.clone().try_inverse().ok_or_else(|| {
        CmpsError::NoConvergence("eigenvector matrix is singular (defective matrix)".into())
    })?;
    Ok(Eigen {
        values,
        right,
        left,
    })
}

fn to_faer(a: &CMatrix) -> faer::Mat<faer::c64> {
    faer::Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

/// Ascending eigenvalues of a Hermitian matrix (the lower triangle is read).
pub fn hermitian_eigenvalues(m: &CMatrix) -> Vec<f64> {
    let mut vals: Vec<f64> = hermitize(m).symmetric_eigenvalues().iter().copied().collect();
    vals.sort_by(f64::total_cmp);
    vals
}

/// Hermitian eigendecomposition: (ascending eigenvalues, eigenvectors as columns).
pub fn hermitian_eigen(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let evd = hermitize(m).symmetric_eigen();
    let mut order: Vec<usize> = (0..evd.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| evd.eigenvalues[a].total_cmp(&evd.eigenvalues[b]));
    let vals = order.iter().map(|&i| evd.eigenvalues[i]).collect();
    let n = m.nrows();
    let vecs = CMatrix::from_fn(n, n, |r, c| evd.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// Choi matrix `Σ_ij |i⟩⟨j| ⊗ Φ(|i⟩⟨j|)` of a vectorized map `Φ` on `D x D`
/// matrices.
pub fn choi_matrix(map: &CMatrix, dim: usize) -> CMatrix {
    CMatrix::from_fn(dim * dim, dim * dim, |row, col| {
        let (i, a) = (row / dim, row % dim);
        let (j, b) = (col / dim, col % dim);
        map[(a * dim + b, i * dim + j)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(n: usize, seed: u64) -> CMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        CMatrix::from_fn(n, n, |_, _| {
            Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        })
    }

    #[test]
    fn vectorize_row_stacking() {
        let m = CMatrix::from_row_slice(2, 2, &[real(1.0), real(2.0), real(3.0), real(4.0)]);
        let v = vectorize(&m).unwrap();
        assert_eq!(v.as_slice(), &[real(1.0), real(2.0), real(3.0), real(4.0)]);
        assert_eq!(devectorize(&v).unwrap(), m);
    }

    #[test]
    fn vectorization_of_sandwich() {
        let a = random_matrix(3, 1);
        let rho = random_matrix(3, 2);
        let b = random_matrix(3, 3);
        let lhs = vectorize(&(&a * &rho * &b)).unwrap();
        let rhs = kron(&a, &b.transpose()) * vectorize(&rho).unwrap();
        assert!(max_abs_vec(&(lhs - rhs)) < 1e-14);
    }

    #[test]
    fn devectorize_rejects_non_square_length() {
        assert!(matches!(
            devectorize(&CVector::zeros(3)),
            Err(CmpsError::ShapeMismatch(_))
        ));
        assert!(vectorize(&CMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn expm_diagonal_and_nilpotent() {
        let d = CMatrix::from_diagonal(&CVector::from_vec(vec![
            Complex64::new(-1.0, 2.0),
            real(0.5),
            real(-30.0),
        ]));
        let e = expm(&d);
        for i in 0..3 {
            assert!((e[(i, i)] - d[(i, i)].exp()).norm() < 1e-13 * e[(i, i)].norm().max(1e-300));
        }
        // exp of a nilpotent Jordan block is a finite series
        let mut n = CMatrix::zeros(3, 3);
        n[(0, 1)] = real(2.0);
        n[(1, 2)] = real(3.0);
        let e = expm(&n);
        assert!((e[(0, 2)] - real(3.0)).norm() < 1e-14);
        assert!((e[(0, 1)] - real(2.0)).norm() < 1e-14);
    }

    #[test]
    fn expm_matches_taylor_series_for_large_norm() {
        let a = random_matrix(4, 7).map(|z| z * 12.0);
        // reference: Taylor series of exp(A / 2^10) squared 10 times
        let small = a.map(|z| z / 1024.0);
        let mut term = identity(4);
        let mut sum = identity(4);
        for k in 1..30 {
            term = &term * &small / real(k as f64);
            sum += &term;
        }
        for _ in 0..10 {
            sum = &sum * &sum;
        }
        let e = expm(&a);
        assert!(max_abs(&(e - &sum)) < 1e-9 * max_abs(&sum));
    }

    #[test]
    fn eigen_left_right_biorthogonal() {
        let a = random_matrix(5, 11);
        let evd = eigen(&a).unwrap();
        for (k, lam) in evd.values.iter().enumerate() {
            let v = evd.right.column(k).into_owned();
            assert!(max_abs_vec(&(&a * &v - v.map(|z| z * lam))) < 1e-12);
        }
        assert!(max_abs(&(&evd.left * &evd.right - identity(5))) < 1e-12);
    }

    #[test]
    fn choi_of_identity_map_is_rank_one() {
        let choi = choi_matrix(&identity(4), 2);
        let vals = hermitian_eigenvalues(&choi);
        assert!((vals[3] - 2.0).abs() < 1e-14);
        assert!(vals[..3].iter().all(|v| v.abs() < 1e-14));
    }
}
