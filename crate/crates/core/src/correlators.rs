//! Bulk-field expectation values by operator insertion into the propagated
//! boundary state, decay fits against the Liouvillian spectrum, the
//! one-parameter family derivative and the lattice generating functional.
//!
//! Conventions. An insertion string is a list `(x, kind)` sorted by position.
//! Insertions are applied to the right state in list order, so at equal
//! positions the earlier entry acts first; for a normal-ordered product
//! `Ψ†(x) Ψ(x)` list `Create` before `Annihilate`.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{CmpsError, Result};
use crate::linalg::{self, CMatrix, CVector, ONE, ZERO};
use crate::liouvillian::{self, SpectralData, Superoperator};
use crate::params::{CmpsParams, Geometry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InsertionKind {
    /// `Ψ`: `R ⊗ 1`.
    Annihilate,
    /// `Ψ†`: `1 ⊗ R̄`.
    Create,
    /// `Ψ'`: `C ⊗ 1` with `C = -[Q, R]`.
    DerivAnnihilate,
    /// `Ψ'†`: `1 ⊗ C̄`.
    DerivCreate,
    /// `Ψ†Ψ` at one point: `R ⊗ R̄`.
    PairDensity,
}

impl InsertionKind {
    pub const ALL: [InsertionKind; 5] = [
        InsertionKind::Annihilate,
        InsertionKind::Create,
        InsertionKind::DerivAnnihilate,
        InsertionKind::DerivCreate,
        InsertionKind::PairDensity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InsertionKind::Annihilate => "annihilate",
            InsertionKind::Create => "create",
            InsertionKind::DerivAnnihilate => "deriv_annihilate",
            InsertionKind::DerivCreate => "deriv_create",
            InsertionKind::PairDensity => "pair_density",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// A field operator lifted to a superoperator.
#[derive(Debug, Clone, PartialEq)]
pub struct Insertion {
    pub kind: InsertionKind,
    pub superop: Superoperator,
}

impl Insertion {
    pub fn new(kind: InsertionKind, params: &CmpsParams) -> Self {
        let q = params.q();
        let c = derivative_operator(&q, params.r());
        Self {
            kind,
            superop: insertion_superop(kind, params.r(), &c),
        }
    }
}

/// `C = -[Q, R]`, the boundary image of `Ψ'` for `x`-independent `R`.
pub fn derivative_operator(q: &CMatrix, r: &CMatrix) -> CMatrix {
    -linalg::commutator(q, r)
}

fn insertion_superop(kind: InsertionKind, r: &CMatrix, c: &CMatrix) -> Superoperator {
    let eye = linalg::identity(r.nrows());
    match kind {
        InsertionKind::Annihilate => Superoperator::sandwich(r, &eye),
        InsertionKind::Create => Superoperator::sandwich(&eye, &r.adjoint()),
        InsertionKind::DerivAnnihilate => Superoperator::sandwich(c, &eye),
        InsertionKind::DerivCreate => Superoperator::sandwich(&eye, &c.adjoint()),
        InsertionKind::PairDensity => Superoperator::sandwich(r, &r.adjoint()),
    }
}

/// Values of a correlator on a separation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelatorResult {
    pub separations: Vec<f64>,
    pub values: Vec<Complex64>,
    /// State norm the raw contraction was divided by.
    pub normalization: f64,
    pub estimator: String,
}

/// Least-squares fit `ln|f(d)| ≈ ln A - rate·d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    pub rate: f64,
    pub prefactor: f64,
    /// Root-mean-square residual of the log fit.
    pub residual: f64,
    pub points_used: usize,
}

/// One term `a_k e^{λ_k d}` of the spectral expansion of the two-point function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralMode {
    pub eigenvalue: Complex64,
    pub weight: Complex64,
}

/// Spectral expansion of `⟨Ψ†(0)Ψ(d)⟩` in the thermodynamic limit.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringBound {
    pub gap: f64,
    /// `c = Σ_{k≠0} |a_k|`, so `|connected(d)| ≤ c e^{-Δd}`.
    pub constant: f64,
    /// Fixed-point weight `a_0 = ⟨Ψ†⟩⟨Ψ⟩`.
    pub disconnected: Complex64,
    /// Decaying modes ordered by descending real part of the eigenvalue.
    pub modes: Vec<SpectralMode>,
}

impl ClusteringBound {
    pub fn bound(&self, d: f64) -> f64 {
        self.constant * (-self.gap * d).exp()
    }

    pub fn connected(&self, d: f64) -> Complex64 {
        self.modes
            .iter()
            .map(|m| m.weight * (m.eigenvalue * d).exp())
            .sum()
    }

    /// Slowest mode whose weight exceeds `rel · c`.
    pub fn slow_mode(&self, rel: f64) -> Option<SpectralMode> {
        self.modes
            .iter()
            .copied()
            .find(|m| m.weight.norm() > rel * self.constant)
    }

    /// A window on which the slow mode dominates the connected correlator
    /// well enough for its rate to be read off a log-linear fit, or `None`
    /// when it is drowned by faster modes before the signal floor.
    ///
    /// Modes decaying within 2% of the slow rate are treated as part of the
    /// envelope.
    pub fn fit_window(&self, floor: f64) -> Option<(f64, f64)> {
        let slow = self.slow_mode(1e-3)?;
        let rate = -slow.eigenvalue.re;
        if rate <= 0.0 {
            return None;
        }
        let (envelope, rest): (Vec<&SpectralMode>, Vec<&SpectralMode>) = self
            .modes
            .iter()
            .filter(|m| m.weight.norm() > 1e-3 * self.constant)
            .partition(|m| -m.eigenvalue.re < 1.02 * rate);
        let a_slow: f64 = envelope.iter().map(|m| m.weight.norm()).sum();
        let c_rest: f64 = rest.iter().map(|m| m.weight.norm()).sum();
        let mut d_lo: f64 = 1.0;
        if let Some(next) = rest
            .iter()
            .map(|m| -m.eigenvalue.re)
            .min_by(|a, b| a.total_cmp(b))
        {
            let sep = next - rate;
            d_lo = d_lo.max((20.0 * c_rest / a_slow * sep / rate).ln() / sep);
        }
        let d_floor = (a_slow / floor).ln() / rate;
        let d_hi = (d_lo + 10.0 / rate).min(d_floor);
        if d_hi < d_lo + 2.0 / rate {
            return None;
        }
        Some((d_lo, d_hi))
    }
}

/// Caches the Liouvillian, its spectral data, `Q` and `C = -[Q, R]` for one
/// parameter set.
#[derive(Debug, Clone)]
pub struct Evaluator {
    params: CmpsParams,
    l: Superoperator,
    spectral: std::result::Result<SpectralData, CmpsError>,
    q: CMatrix,
    c: CMatrix,
}

impl Evaluator {
    pub fn new(params: &CmpsParams) -> Self {
        let l = liouvillian::liouvillian(params);
        let spectral = liouvillian::steady_state_with(&l, params.tolerances());
        let q = params.q();
        let c = derivative_operator(&q, params.r());
        Self {
            params: params.clone(),
            l,
            spectral,
            q,
            c,
        }
    }

    pub fn params(&self) -> &CmpsParams {
        &self.params
    }

    pub fn liouvillian(&self) -> &Superoperator {
        &self.l
    }

    pub fn q(&self) -> &CMatrix {
        &self.q
    }

    pub fn c(&self) -> &CMatrix {
        &self.c
    }

    pub fn spectral(&self) -> Result<&SpectralData> {
        self.spectral.as_ref().map_err(|e| e.clone())
    }

    pub fn insertion(&self, kind: InsertionKind) -> Superoperator {
        insertion_superop(kind, self.params.r(), &self.c)
    }

    fn dim(&self) -> usize {
        self.params.dim()
    }

    /// Steady state with the uniqueness check required by bulk expectations.
    fn bulk_state(&self) -> Result<&SpectralData> {
        let s = self.spectral()?;
        if s.degenerate_fixed_space {
            return Err(CmpsError::DegenerateFixedSpace {
                count: s.zero_modes(self.params.tolerances().zero_eigenvalue),
            });
        }
        Ok(s)
    }

    /// Starting vector and the interval covered: `ρ_ss` on the line, or
    /// `ρ(0)` on `[0, L]`.
    fn initial(&self) -> Result<(CVector, Option<f64>)> {
        match self.params.geometry() {
            Geometry::Thermodynamic => {
                Ok((linalg::vectorize(&self.bulk_state()?.steady_state)?, None))
            }
            Geometry::Finite {
                length,
                boundary_rho,
            } => Ok((linalg::vectorize(boundary_rho)?, Some(*length))),
        }
    }

    fn check_positions(&self, positions: &[f64], length: Option<f64>) -> Result<()> {
        if positions.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(CmpsError::UnsortedPositions);
        }
        for &x in positions {
            let out = match length {
                None => !x.is_finite(),
                Some(len) => !(0.0..=len).contains(&x),
            };
            if out {
                return Err(CmpsError::PositionOutOfRange {
                    position: x,
                    length: length.unwrap_or(f64::INFINITY),
                });
            }
        }
        Ok(())
    }

    /// Raw contraction `⟨1| ... S_2 e^{L(x_2-x_1)} S_1 ... |ρ⟩` and the norm
    /// it is divided by.
    fn contract(&self, items: &[(f64, &CMatrix)]) -> Result<(Complex64, f64)> {
        let positions: Vec<f64> = items.iter().map(|(x, _)| *x).collect();
        let (mut v, length) = self.initial()?;
        self.check_positions(&positions, length)?;
        let start = match length {
            None => positions.first().copied().unwrap_or(0.0),
            Some(_) => 0.0,
        };
        let mut at = start;
        for (x, s) in items {
            v = liouvillian::propagate(&self.l, &v, x - at)?;
            v = *s * v;
            at = *x;
        }
        let tr = linalg::trace_covector(self.dim());
        match length {
            None => Ok((linalg::pair(&tr, &v), 1.0)),
            Some(len) => {
                v = liouvillian::propagate(&self.l, &v, len - at)?;
                let (rho0, _) = self.initial()?;
                let norm =
                    linalg::pair(&tr, &liouvillian::propagate(&self.l, &rho0, len)?).re;
                if !(norm.abs() > 0.0) {
                    return Err(CmpsError::NonNormalizableState);
                }
                Ok((linalg::pair(&tr, &v) / norm, norm))
            }
        }
    }

    /// Expectation of a sorted insertion string.
    pub fn expectation(&self, insertions: &[(f64, InsertionKind)]) -> Result<Complex64> {
        let mats: Vec<Superoperator> = insertions.iter().map(|(_, k)| self.insertion(*k)).collect();
        let items: Vec<(f64, &CMatrix)> = insertions
            .iter()
            .zip(&mats)
            .map(|((x, _), s)| (*x, s.matrix()))
            .collect();
        Ok(self.contract(&items)?.0)
    }

    /// `n = ⟨Ψ†Ψ⟩`, at `x = 0` in finite geometry.
    pub fn density(&self) -> Result<f64> {
        Ok(self.expectation(&[(0.0, InsertionKind::PairDensity)])?.re)
    }

    fn norm(&self) -> Result<f64> {
        Ok(self.contract(&[])?.1)
    }

    fn grid<F>(&self, separations: &[f64], f: F) -> Result<Vec<Complex64>>
    where
        F: Fn(f64) -> Result<Complex64> + Sync,
    {
        separations
            .par_iter()
            .map(|&d| {
                if d < 0.0 {
                    Err(CmpsError::NegativeDistance(d))
                } else {
                    f(d)
                }
            })
            .collect()
    }

    fn result(&self, separations: &[f64], values: Vec<Complex64>) -> Result<CorrelatorResult> {
        Ok(CorrelatorResult {
            separations: separations.to_vec(),
            values,
            normalization: self.norm()?,
            estimator: "insertion-calculus".into(),
        })
    }

    /// `⟨Ψ†(0) Ψ(d)⟩`.
    pub fn two_point_at(&self, d: f64) -> Result<Complex64> {
        self.expectation(&[(0.0, InsertionKind::Create), (d, InsertionKind::Annihilate)])
    }

    pub fn two_point(&self, separations: &[f64]) -> Result<CorrelatorResult> {
        let values = self.grid(separations, |d| self.two_point_at(d))?;
        self.result(separations, values)
    }

    /// `⟨Ψ†(0) Ψ(d)⟩ - ⟨Ψ†(0)⟩⟨Ψ(d)⟩`.
    pub fn connected_two_point_at(&self, d: f64) -> Result<Complex64> {
        let full = self.two_point_at(d)?;
        let create = self.expectation(&[(0.0, InsertionKind::Create)])?;
        let annihilate = self.expectation(&[(d, InsertionKind::Annihilate)])?;
        Ok(full - create * annihilate)
    }

    pub fn connected_two_point(&self, separations: &[f64]) -> Result<CorrelatorResult> {
        let values = self.grid(separations, |d| self.connected_two_point_at(d))?;
        let mut out = self.result(separations, values)?;
        out.estimator = "insertion-calculus-connected".into();
        Ok(out)
    }

    /// `g₂(d) = ⟨Ψ†(0)Ψ†(d)Ψ(d)Ψ(0)⟩ / (n(0) n(d))`.
    pub fn pair_correlation(&self, separations: &[f64]) -> Result<CorrelatorResult> {
        let n0 = self.density()?;
        let zero = n0.abs() <= 1e-14 * (1.0 + linalg::max_abs(self.params.r()).powi(2));
        if zero {
            return Err(CmpsError::ZeroDensity);
        }
        let values = self.grid(separations, |d| {
            let joint = self.expectation(&[
                (0.0, InsertionKind::PairDensity),
                (d, InsertionKind::PairDensity),
            ])?;
            let nd = match self.params.geometry() {
                Geometry::Thermodynamic => n0,
                Geometry::Finite { .. } => {
                    self.expectation(&[(d, InsertionKind::PairDensity)])?.re
                }
            };
            Ok(joint / (n0 * nd))
        })?;
        let mut out = self.result(separations, values)?;
        out.estimator = "insertion-calculus-g2".into();
        Ok(out)
    }

    /// `⟨Ψ†²Ψ²⟩` at one point.
    pub fn pair_density_coincident(&self) -> Result<f64> {
        let r2 = self.params.r() * self.params.r();
        let s = Superoperator::sandwich(&r2, &r2.adjoint());
        Ok(self.contract(&[(0.0, s.matrix())])?.0.re)
    }

    /// `⟨Ψ'†Ψ'⟩ = ⟨1|C ⊗ C̄|ρ⟩`.
    pub fn kinetic_density(&self) -> Result<f64> {
        Ok(self
            .expectation(&[(0.0, InsertionKind::DerivCreate), (0.0, InsertionKind::DerivAnnihilate)])?
            .re)
    }

    /// `⟨Ψ'†Ψ'⟩ + c ⟨Ψ†²Ψ²⟩ - μ ⟨Ψ†Ψ⟩`.
    pub fn lieb_liniger_energy_density(&self, coupling: f64, chemical_potential: f64) -> Result<f64> {
        Ok(self.kinetic_density()? + coupling * self.pair_density_coincident()?
            - chemical_potential * self.density()?)
    }

    fn gapped(&self) -> Result<&SpectralData> {
        let s = self.bulk_state()?;
        if s.gapless || s.gap <= 0.0 {
            return Err(CmpsError::GaplessState);
        }
        Ok(s)
    }

    /// Log-linear fit of `|connected two-point|` on `n_points` equally spaced
    /// separations in `[d_min, d_max]`. Points under the signal floor are
    /// dropped.
    pub fn decay_fit(&self, d_min: f64, d_max: f64, n_points: usize) -> Result<DecayFit> {
        if self.params.geometry().is_thermodynamic() {
            self.gapped()?;
        } else {
            let s = self.spectral()?;
            if s.gapless {
                return Err(CmpsError::GaplessState);
            }
        }
        if !(d_min >= 0.0 && d_max > d_min && n_points >= 2) {
            return Err(CmpsError::InvalidArgument(format!(
                "decay window [{d_min}, {d_max}] with {n_points} points"
            )));
        }
        let grid: Vec<f64> = (0..n_points)
            .map(|i| d_min + (d_max - d_min) * i as f64 / (n_points - 1) as f64)
            .collect();
        let values = self.connected_two_point(&grid)?.values;
        let floor = self.params.tolerances().signal_floor;
        let pts: Vec<(f64, f64)> = grid
            .iter()
            .zip(&values)
            .filter(|(_, v)| v.norm() >= floor)
            .map(|(d, v)| (*d, v.norm().ln()))
            .collect();
        if pts.len() < 2 {
            let max = values.iter().map(|v| v.norm()).fold(0.0, f64::max);
            return Err(CmpsError::SignalBelowFloor(max));
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let residual = (pts
            .iter()
            .map(|p| (p.1 - intercept - slope * p.0).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
        Ok(DecayFit {
            rate: -slope,
            prefactor: intercept.exp(),
            residual,
            points_used: pts.len(),
        })
    }

    /// Spectral expansion of the thermodynamic two-point function.
    pub fn clustering_bound(&self) -> Result<ClusteringBound> {
        if !self.params.geometry().is_thermodynamic() {
            return Err(CmpsError::InvalidArgument(
                "the clustering bound is defined in the thermodynamic limit".into(),
            ));
        }
        let s = self.gapped()?;
        let evd = linalg::eigen(self.l.matrix())?;
        let fixed = (0..evd.values.len())
            .min_by(|&a, &b| evd.values[a].norm().total_cmp(&evd.values[b].norm()))
            .expect("nonempty spectrum");
        let tr = linalg::trace_covector(self.dim());
        let left = linalg::covector_mul(&tr, self.insertion(InsertionKind::Annihilate).matrix());
        let right = self.insertion(InsertionKind::Create).apply(&linalg::vectorize(&s.steady_state)?);
        let weight = |k: usize| {
            let lk = evd.left.row(k).transpose();
            linalg::pair(&left, &evd.right.column(k).into_owned()) * linalg::pair(&lk, &right)
        };
        let mut modes: Vec<SpectralMode> = (0..evd.values.len())
            .filter(|&k| k != fixed)
            .map(|k| SpectralMode {
                eigenvalue: evd.values[k],
                weight: weight(k),
            })
            .collect();
        modes.sort_by(|a, b| {
            b.eigenvalue
                .re
                .total_cmp(&a.eigenvalue.re)
                .then(a.eigenvalue.im.total_cmp(&b.eigenvalue.im))
        });
        Ok(ClusteringBound {
            gap: s.gap,
            constant: modes.iter().map(|m| m.weight.norm()).sum(),
            disconnected: weight(fixed),
            modes,
        })
    }

    /// `d/dt ⟨O⟩` along `(K + t dK, R + t dR)` at `t = 0`.
    ///
    /// The derivative of each propagator `e^{L s}` is integrated as
    /// `∫ e^{L(s-u)} dL e^{L u} du` with composite Simpson quadrature; each
    /// insertion contributes its own superoperator derivative. In the
    /// thermodynamic limit the steady state contributes `∫_0^W e^{Lu} dL ρ du`
    /// with `W = 20/Δ`.
    pub fn family_derivative(
        &self,
        dk: &CMatrix,
        dr: &CMatrix,
        insertions: &[(f64, InsertionKind)],
    ) -> Result<Complex64> {
        let d = self.dim();
        for (name, m) in [("dK", dk), ("dR", dr)] {
            if m.nrows() != d || m.ncols() != d {
                return Err(CmpsError::ShapeMismatch(format!(
                    "{name} is {}x{}, expected {d}x{d}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        let herm = linalg::hermiticity_defect(dk);
        let allowed = 1e-12 * linalg::max_abs(dk).max(1.0);
        if herm > allowed {
            return Err(CmpsError::NonHermitianK {
                defect: herm,
                tolerance: allowed,
            });
        }
        let r = self.params.r();
        let eye = linalg::identity(d);
        let dq = dk.map(|z| -linalg::IMAG * z)
            - (dr.adjoint() * r + r.adjoint() * dr).map(|z| z * 0.5);
        let dl = linalg::kron(&dq, &eye)
            + linalg::kron(&eye, &dq.conjugate())
            + linalg::kron(dr, &r.conjugate())
            + linalg::kron(r, &dr.conjugate());
        let dc = -(linalg::commutator(&dq, r) + linalg::commutator(&self.q, dr));
        let d_insertion = |kind: InsertionKind| match kind {
            InsertionKind::Annihilate => linalg::kron(dr, &eye),
            InsertionKind::Create => linalg::kron(&eye, &dr.conjugate()),
            InsertionKind::DerivAnnihilate => linalg::kron(&dc, &eye),
            InsertionKind::DerivCreate => linalg::kron(&eye, &dc.conjugate()),
            InsertionKind::PairDensity => {
                linalg::kron(dr, &r.conjugate()) + linalg::kron(r, &dr.conjugate())
            }
        };

        let gap = self.spectral().map(|s| s.gap).unwrap_or(0.0);
        let h_max = if gap > 0.0 { 0.01f64.min(0.1 / gap) } else { 0.01 };

        let (rho0, length) = self.initial()?;
        let positions: Vec<f64> = insertions.iter().map(|(x, _)| *x).collect();
        self.check_positions(&positions, length)?;
        let mats: Vec<CMatrix> = insertions
            .iter()
            .map(|(_, k)| self.insertion(*k).into_matrix())
            .collect();

        // Breakpoints: segment i runs from `cuts[i]` to `cuts[i + 1]`; the
        // insertion `i` sits at `cuts[i + 1]` (finite) or `cuts[i]` (line).
        let tr = linalg::trace_covector(d);
        let start = match length {
            None => positions.first().copied().unwrap_or(0.0),
            Some(_) => 0.0,
        };
        let end = length.unwrap_or_else(|| positions.last().copied().unwrap_or(0.0));

        // Right states just before each insertion and after the last one.
        let mut rights_before = Vec::with_capacity(insertions.len());
        let mut v = rho0.clone();
        let mut at = start;
        for ((x, _), s) in insertions.iter().zip(&mats) {
            v = liouvillian::propagate(&self.l, &v, x - at)?;
            rights_before.push(v.clone());
            v = s * v;
            at = *x;
        }
        // Left covectors just after each insertion, built from the closing end.
        let mut lefts_after = vec![CVector::zeros(d * d); insertions.len()];
        let mut w = tr.clone();
        let mut at = end;
        for i in (0..insertions.len()).rev() {
            let x = positions[i];
            w = linalg::covector_mul(&w, &self.l.exp(at - x)?);
            lefts_after[i] = w.clone();
            w = linalg::covector_mul(&w, &mats[i]);
            at = x;
        }
        let left_start = linalg::covector_mul(&w, &self.l.exp(at - start)?);

        let mut total = ZERO;
        for i in 0..insertions.len() {
            let ds = d_insertion(insertions[i].1);
            total += linalg::pair(&lefts_after[i], &(ds * &rights_before[i]));
        }

        // Propagator segments.
        let mut right = rho0.clone();
        let mut seg_start = start;
        let mut idx = 0;
        loop {
            let seg_end = if idx < insertions.len() { positions[idx] } else { end };
            let left = if idx < insertions.len() {
                linalg::covector_mul(&lefts_after[idx], &mats[idx])
            } else {
                tr.clone()
            };
            total += self.segment_integral(&left, &dl, &right, seg_end - seg_start, h_max)?;
            if idx == insertions.len() {
                break;
            }
            right = &mats[idx] * &rights_before[idx];
            seg_start = seg_end;
            idx += 1;
        }

        if length.is_none() {
            let s = self.gapped()?;
            let window = 20.0 / s.gap;
            let source = &dl * &linalg::vectorize(&s.steady_state)?;
            total += self.tail_integral(&left_start, &source, window, h_max)?;
        }

        match length {
            None => Ok(total),
            Some(_) => {
                // The raw contraction is divided by the norm; its derivative
                // vanishes for a trace-preserving family but is kept for
                // consistency.
                let value = if insertions.is_empty() {
                    ONE
                } else {
                    self.expectation(insertions)?
                };
                let norm = self.norm()?;
                let dnorm =
                    self.segment_integral(&tr, &dl, &rho0, end - start, h_max)?;
                Ok((total - value * dnorm) / norm)
            }
        }
    }

    /// `∫_0^ℓ left · e^{L(ℓ-u)} dL e^{Lu} · right du`.
    fn segment_integral(
        &self,
        left: &CVector,
        dl: &CMatrix,
        right: &CVector,
        len: f64,
        h_max: f64,
    ) -> Result<Complex64> {
        if len <= 0.0 {
            return Ok(ZERO);
        }
        let n = simpson_intervals(len, h_max);
        let h = len / n as f64;
        let p = self.l.exp(h)?;
        let mut rights = Vec::with_capacity(n + 1);
        let mut v = right.clone();
        rights.push(v.clone());
        for _ in 0..n {
            v = &p * v;
            rights.push(v.clone());
        }
        let mut w = left.clone();
        let mut acc = ZERO;
        for k in (0..=n).rev() {
            acc += simpson_weight(k, n) * linalg::pair(&w, &(dl * &rights[k]));
            if k > 0 {
                w = linalg::covector_mul(&w, &p);
            }
        }
        Ok(acc * (h / 3.0))
    }

    /// `∫_0^W left · e^{Lu} · source du`.
    fn tail_integral(&self, left: &CVector, source: &CVector, window: f64, h_max: f64) -> Result<Complex64> {
        let n = simpson_intervals(window, h_max);
        let h = window / n as f64;
        let p = self.l.exp(h)?;
        let mut w = left.clone();
        let mut acc = ZERO;
        for k in 0..=n {
            acc += simpson_weight(k, n) * linalg::pair(&w, source);
            w = linalg::covector_mul(&w, &p);
        }
        Ok(acc * (h / 3.0))
    }

    /// `Z[J] = ⟨1| ∏_r exp[ε(L + J_r)] |ρ⟩`, sites in increasing `r`.
    ///
    /// `λ_r` multiplies the annihilation insertion `R ⊗ 1` and `λ̄_r` the
    /// creation insertion, so `∂Z/∂λ_r` (Wirtinger, `λ̄` held fixed) inserts
    /// `Ψ(rε)` with weight `ε`. Likewise `μ_r` couples to `Ψ'`.
    pub fn generating_functional(&self, sources: &SourceField) -> Result<Complex64> {
        let eps = sources.eps;
        if !(eps > 0.0) {
            return Err(CmpsError::StepNotPositive(eps));
        }
        if sources.lambda.len() != sources.mu.len() {
            return Err(CmpsError::ShapeMismatch(format!(
                "{} λ sources but {} μ sources",
                sources.lambda.len(),
                sources.mu.len()
            )));
        }
        let (mut v, length) = self.initial()?;
        let n = sources.lambda.len();
        if let Some(len) = length {
            if ((n as f64) * eps - len).abs() > 1e-9 * len {
                return Err(CmpsError::ShapeMismatch(format!(
                    "{n} sites of step {eps} do not cover length {len}"
                )));
            }
        }
        let a = self.insertion(InsertionKind::Annihilate).into_matrix();
        let cr = self.insertion(InsertionKind::Create).into_matrix();
        let da = self.insertion(InsertionKind::DerivAnnihilate).into_matrix();
        let dcr = self.insertion(InsertionKind::DerivCreate).into_matrix();
        let free = linalg::expm(&self.l.matrix().map(|z| z * eps));
        for (lam, mu) in sources.lambda.iter().zip(&sources.mu) {
            if *lam == ZERO && *mu == ZERO {
                v = &free * v;
                continue;
            }
            let j = a.map(|z| z * lam)
                + cr.map(|z| z * lam.conj())
                + da.map(|z| z * mu)
                + dcr.map(|z| z * mu.conj());
            let step = linalg::expm(&(self.l.matrix() + j).map(|z| z * eps));
            v = step * v;
        }
        Ok(linalg::pair(&linalg::trace_covector(self.dim()), &v))
    }

    /// Nested central finite differences of `Z` at zero sources with respect
    /// to the listed slots, each with step `h`. Each slot is a Wirtinger
    /// derivative: `∂/∂λ = ½(∂_x - i∂_y)`, `∂/∂λ̄ = ½(∂_x + i∂_y)`.
    pub fn source_derivative(
        &self,
        eps: f64,
        sites: usize,
        slots: &[SourceSlot],
        h: f64,
    ) -> Result<Complex64> {
        if let Some(bad) = slots.iter().find(|s| s.site >= sites) {
            return Err(CmpsError::InvalidArgument(format!(
                "source slot at site {} outside {sites} sites",
                bad.site
            )));
        }
        let sources = SourceField::zeros(eps, sites);
        self.nested_difference(sources, slots, h)
    }

    fn nested_difference(&self, sources: SourceField, slots: &[SourceSlot], h: f64) -> Result<Complex64> {
        let Some((slot, rest)) = slots.split_first() else {
            return self.generating_functional(&sources);
        };
        let eval = |shift: Complex64| -> Result<Complex64> {
            let mut s = sources.clone();
            let target = match slot.component {
                SourceComponent::Lambda | SourceComponent::LambdaBar => &mut s.lambda[slot.site],
                SourceComponent::Mu | SourceComponent::MuBar => &mut s.mu[slot.site],
            };
            *target += shift;
            self.nested_difference(s, rest, h)
        };
        let hr = Complex64::new(h, 0.0);
        let hi = Complex64::new(0.0, h);
        let dx = (eval(hr)? - eval(-hr)?) / (2.0 * h);
        let dy = (eval(hi)? - eval(-hi)?) / (2.0 * h);
        let sign = match slot.component {
            SourceComponent::Lambda | SourceComponent::Mu => -1.0,
            SourceComponent::LambdaBar | SourceComponent::MuBar => 1.0,
        };
        Ok((dx + linalg::IMAG * dy * sign) * 0.5)
    }

    /// `δᵏZ / δJ(x_1)…δJ(x_k) ≈ source_derivative / εᵏ`.
    pub fn functional_derivative(
        &self,
        eps: f64,
        sites: usize,
        slots: &[SourceSlot],
        h: f64,
    ) -> Result<Complex64> {
        Ok(self.source_derivative(eps, sites, slots, h)? / eps.powi(slots.len() as i32))
    }
}

fn simpson_intervals(len: f64, h_max: f64) -> usize {
    let mut n = ((len / h_max).ceil() as usize).max(2);
    if n % 2 == 1 {
        n += 1;
    }
    n
}

fn simpson_weight(k: usize, n: usize) -> f64 {
    if k == 0 || k == n {
        1.0
    } else if k % 2 == 1 {
        4.0
    } else {
        2.0
    }
}

/// Lattice sources `λ_r, μ_r` on sites `r = 0..N` of step `ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceField {
    pub eps: f64,
    pub lambda: Vec<Complex64>,
    pub mu: Vec<Complex64>,
}

impl SourceField {
    pub fn zeros(eps: f64, sites: usize) -> Self {
        Self {
            eps,
            lambda: vec![ZERO; sites],
            mu: vec![ZERO; sites],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceComponent {
    /// Couples to `Ψ`.
    Lambda,
    /// Couples to `Ψ†`.
    LambdaBar,
    /// Couples to `Ψ'`.
    Mu,
    /// Couples to `Ψ'†`.
    MuBar,
}

/// One functional-derivative slot: a source component at a lattice site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SourceSlot {
    pub site: usize,
    pub component: SourceComponent,
}

impl SourceSlot {
    pub fn new(site: usize, component: SourceComponent) -> Self {
        Self { site, component }
    }
}

pub fn density(params: &CmpsParams) -> Result<f64> {
    Evaluator::new(params).density()
}

pub fn two_point(params: &CmpsParams, separations: &[f64]) -> Result<CorrelatorResult> {
    Evaluator::new(params).two_point(separations)
}

pub fn pair_correlation(params: &CmpsParams, separations: &[f64]) -> Result<CorrelatorResult> {
    Evaluator::new(params).pair_correlation(separations)
}

pub fn kinetic_density(params: &CmpsParams) -> Result<f64> {
    Evaluator::new(params).kinetic_density()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{real, IMAG};
    use crate::params::random_params;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use rand::SeedableRng;

    fn sigma_minus() -> CMatrix {
        CMatrix::from_row_slice(2, 2, &[ZERO, ZERO, real(1.0), ZERO])
    }

    fn rf_k() -> CMatrix {
        CMatrix::from_row_slice(2, 2, &[ZERO, real(0.5), real(0.5), ZERO])
    }

    fn rf() -> CmpsParams {
        CmpsParams::new(2, rf_k(), sigma_minus(), Geometry::Thermodynamic).unwrap()
    }

    fn damping() -> CmpsParams {
        CmpsParams::new(2, CMatrix::zeros(2, 2), sigma_minus(), Geometry::Thermodynamic).unwrap()
    }

    fn scalar(r: Complex64) -> CmpsParams {
        CmpsParams::new(1, CMatrix::from_element(1, 1, real(0.3)), CMatrix::from_element(1, 1, r), Geometry::Thermodynamic)
            .unwrap()
    }

    fn hermitian(seed: u64, dim: usize) -> CMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        random_params(&mut rng, dim, 1.0, Geometry::Thermodynamic).unwrap().k().clone()
    }

    #[test]
    fn empty_string_is_normalized() {
        let ev = Evaluator::new(&rf());
        assert!((ev.expectation(&[]).unwrap() - ONE).norm() < 1e-12);
    }

    #[test]
    fn coherent_state_moments() {
        let r = Complex64::new(0.7, -0.4);
        let ev = Evaluator::new(&scalar(r));
        let n = r.norm_sqr();
        assert!((ev.density().unwrap() - n).abs() < 1e-12);
        for v in ev.two_point(&[0.0, 1.0, 7.5]).unwrap().values {
            assert!((v - real(n)).norm() < 1e-12);
        }
        for v in ev.pair_correlation(&[0.0, 0.5, 3.0]).unwrap().values {
            assert!((v - ONE).norm() < 1e-12);
        }
        assert!(ev.kinetic_density().unwrap().abs() < 1e-12);
        let (c, mu) = (0.8, 1.3);
        let e = ev.lieb_liniger_energy_density(c, mu).unwrap();
        assert!((e - (c * n * n - mu * n)).abs() < 1e-12);
        assert!(matches!(ev.decay_fit(1.0, 5.0, 10), Err(CmpsError::GaplessState)));
    }

    #[test]
    fn empty_field() {
        let p = CmpsParams::new(
            2,
            rf_k(),
            CMatrix::zeros(2, 2),
            Geometry::Finite {
                length: 3.0,
                boundary_rho: CMatrix::identity(2, 2).map(|z| z * 0.5),
            },
        )
        .unwrap();
        let ev = Evaluator::new(&p);
        assert_eq!(ev.density().unwrap(), 0.0);
        assert!(ev.two_point(&[0.0, 1.0, 2.0]).unwrap().values.iter().all(|v| v.norm() == 0.0));
        assert_eq!(ev.kinetic_density().unwrap(), 0.0);
        assert_eq!(ev.lieb_liniger_energy_density(1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn damping_vacuum() {
        let ev = Evaluator::new(&damping());
        assert!(ev.density().unwrap().abs() < 1e-14);
        assert!(matches!(ev.pair_correlation(&[1.0]), Err(CmpsError::ZeroDensity)));
    }

    #[test]
    fn rf_values() {
        let ev = Evaluator::new(&rf());
        assert!((ev.density().unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let g2 = ev.pair_correlation(&[0.0]).unwrap().values[0];
        assert!(g2.norm() < 1e-12);
        assert!((ev.kinetic_density().unwrap() - 1.0 / 6.0).abs() < 1e-12);
        let tp = ev.two_point(&[0.0]).unwrap();
        assert!((tp.values[0] - real(1.0 / 3.0)).norm() < 1e-12);
        assert_eq!(tp.estimator, "insertion-calculus");
        // ⟨Ψ⟩ = tr(R ρ_ss) = -i/3, so the two-point function tends to 1/9.
        let psi = ev.expectation(&[(0.0, InsertionKind::Annihilate)]).unwrap();
        assert!((psi + IMAG / 3.0).norm() < 1e-12);
        let far = ev.two_point_at(80.0).unwrap();
        assert!((far - real(1.0 / 9.0)).norm() < 1e-12);
    }

    #[test]
    fn lieb_liniger_consistency() {
        let ev = Evaluator::new(&rf());
        let n = ev.density().unwrap();
        let g2 = ev.pair_correlation(&[0.0]).unwrap().values[0].re;
        let expected = ev.kinetic_density().unwrap() + g2 * n * n - n;
        assert!((ev.lieb_liniger_energy_density(1.0, 1.0).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn ordering_and_range_errors() {
        let ev = Evaluator::new(&rf());
        let err = ev.expectation(&[(1.0, InsertionKind::Create), (0.0, InsertionKind::Annihilate)]);
        assert!(matches!(err, Err(CmpsError::UnsortedPositions)));
        let finite = rf()
            .with_geometry(Geometry::Finite {
                length: 2.0,
                boundary_rho: CMatrix::identity(2, 2).map(|z| z * 0.5),
            })
            .unwrap();
        let err = Evaluator::new(&finite).expectation(&[(2.5, InsertionKind::Annihilate)]);
        assert!(matches!(err, Err(CmpsError::PositionOutOfRange { .. })));
        assert!(matches!(ev.two_point(&[-1.0]), Err(CmpsError::NegativeDistance(_))));
    }

    #[test]
    fn degenerate_steady_state_refused() {
        let k = CMatrix::from_row_slice(2, 2, &[real(1.0), ZERO, ZERO, real(-1.0)]);
        let p = CmpsParams::new(2, k, CMatrix::zeros(2, 2), Geometry::Thermodynamic).unwrap();
        let ev = Evaluator::new(&p);
        assert!(matches!(ev.density(), Err(CmpsError::DegenerateFixedSpace { .. })));
    }

    #[test]
    fn finite_geometry_two_point_relaxes_to_bulk() {
        let p = rf()
            .with_geometry(Geometry::Finite {
                length: 60.0,
                boundary_rho: CMatrix::from_row_slice(2, 2, &[ZERO, ZERO, ZERO, real(1.0)]),
            })
            .unwrap();
        let ev = Evaluator::new(&p);
        // Ground-state boundary: no photon at x = 0.
        assert!(ev.density().unwrap().abs() < 1e-14);
        let bulk = Evaluator::new(&rf());
        let far = ev.expectation(&[(30.0, InsertionKind::Create), (31.0, InsertionKind::Annihilate)]).unwrap();
        assert!((far - bulk.two_point_at(1.0).unwrap()).norm() < 1e-10);
        assert!((ev.contract(&[]).unwrap().1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rf_decay_rate_matches_slow_mode() {
        let ev = Evaluator::new(&rf());
        let fit = ev.decay_fit(2.0, 10.0, 50).unwrap();
        let cb = ev.clustering_bound().unwrap();
        let slow = cb.slow_mode(1e-3).unwrap();
        assert!((fit.rate / -slow.eigenvalue.re - 1.0).abs() < 0.05, "rate {}", fit.rate);
        assert!((cb.disconnected - real(1.0 / 9.0)).norm() < 1e-12);
        for d in [0.0, 1.0, 3.0, 9.0] {
            let direct = ev.connected_two_point_at(d).unwrap();
            assert!((direct - cb.connected(d)).norm() < 1e-12);
            assert!(direct.norm() <= cb.bound(d) * (1.0 + 1e-9));
        }
    }

    #[test]
    fn damping_finite_boundary_decays_at_half_rate() {
        let plus = CMatrix::from_element(2, 2, real(0.5));
        let p = damping().with_geometry(Geometry::Finite { length: 20.0, boundary_rho: plus }).unwrap();
        let ev = Evaluator::new(&p);
        let fit = ev.decay_fit(1.0, 10.0, 30).unwrap();
        assert!((fit.rate - 0.5).abs() < 1e-6, "rate {}", fit.rate);
        let c0 = ev.two_point_at(0.0).unwrap().norm();
        for d in [1.0, 2.0, 5.0, 10.0] {
            assert!(ev.two_point_at(d).unwrap().norm() <= c0 * (-0.5 * d).exp() * (1.0 + 1e-9));
        }
    }

    #[test]
    fn family_derivative_trivial_cases() {
        let ev = Evaluator::new(&rf());
        let z = CMatrix::zeros(2, 2);
        let ins = [(0.0, InsertionKind::PairDensity)];
        assert_eq!(ev.family_derivative(&z, &z, &ins).unwrap(), ZERO);
        let dk = hermitian(4, 2);
        let dr = hermitian(5, 2).map(|x| x * Complex64::new(0.3, 0.8));
        assert!(ev.family_derivative(&dk, &dr, &[]).unwrap().norm() < 1e-10);
        assert!(matches!(
            ev.family_derivative(&CMatrix::zeros(3, 3), &z, &ins),
            Err(CmpsError::ShapeMismatch(_))
        ));
    }

    fn finite_difference(p: &CmpsParams, dk: &CMatrix, dr: &CMatrix, ins: &[(f64, InsertionKind)], h: f64) -> Complex64 {
        let plus = Evaluator::new(&p.perturbed(dk, dr, h).unwrap()).expectation(ins).unwrap();
        let minus = Evaluator::new(&p.perturbed(dk, dr, -h).unwrap()).expectation(ins).unwrap();
        (plus - minus) / (2.0 * h)
    }

    #[test]
    fn family_derivative_matches_finite_differences() {
        let p = rf();
        let ev = Evaluator::new(&p);
        let dk = hermitian(9, 2);
        let dr = hermitian(10, 2).map(|x| x * Complex64::new(0.6, -0.2));
        for ins in [
            vec![(0.0, InsertionKind::PairDensity)],
            vec![(0.0, InsertionKind::Create), (1.5, InsertionKind::Annihilate)],
            vec![(0.0, InsertionKind::DerivCreate), (0.0, InsertionKind::DerivAnnihilate)],
        ] {
            let exact = ev.family_derivative(&dk, &dr, &ins).unwrap();
            let fd = finite_difference(&p, &dk, &dr, &ins, 1e-4);
            assert!((exact - fd).norm() < 1e-6 * (1.0 + fd.norm()), "{exact} vs {fd}");
        }
        let finite = p
            .with_geometry(Geometry::Finite {
                length: 4.0,
                boundary_rho: CMatrix::from_row_slice(2, 2, &[real(0.3), real(0.1), real(0.1), real(0.7)]),
            })
            .unwrap();
        let ins = vec![(0.5, InsertionKind::Create), (2.0, InsertionKind::Annihilate)];
        let exact = Evaluator::new(&finite).family_derivative(&dk, &dr, &ins).unwrap();
        let fd = finite_difference(&finite, &dk, &dr, &ins, 1e-4);
        assert!((exact - fd).norm() < 1e-6 * (1.0 + fd.norm()), "{exact} vs {fd}");
    }

    #[test]
    fn generating_functional_basics() {
        let ev = Evaluator::new(&rf());
        let z = ev.generating_functional(&SourceField::zeros(1e-2, 300)).unwrap();
        assert!((z - ONE).norm() < 1e-12);
        let mut bad = SourceField::zeros(1e-2, 3);
        bad.mu.pop();
        assert!(matches!(ev.generating_functional(&bad), Err(CmpsError::ShapeMismatch(_))));
        assert!(matches!(
            ev.generating_functional(&SourceField::zeros(0.0, 3)),
            Err(CmpsError::StepNotPositive(_))
        ));
    }

    #[test]
    fn source_derivatives_reproduce_insertions() {
        let ev = Evaluator::new(&rf());
        let eps = 1e-3;
        let sites = 2000;
        let psi = ev.expectation(&[(0.0, InsertionKind::Annihilate)]).unwrap();
        let first = ev
            .functional_derivative(eps, sites, &[SourceSlot::new(100, SourceComponent::Lambda)], 1e-3)
            .unwrap();
        assert!((first - psi).norm() < 5e-3, "{first} vs {psi}");
        let first_bar = ev
            .functional_derivative(eps, sites, &[SourceSlot::new(100, SourceComponent::LambdaBar)], 1e-3)
            .unwrap();
        assert!((first_bar - psi.conj()).norm() < 5e-3);

        // Ψ† at site 500, Ψ at site 1500: separation 1.
        let mixed = ev
            .functional_derivative(
                eps,
                sites,
                &[SourceSlot::new(500, SourceComponent::LambdaBar), SourceSlot::new(1500, SourceComponent::Lambda)],
                1e-3,
            )
            .unwrap();
        let tp = ev.two_point_at(1.0).unwrap();
        assert!((mixed - tp).norm() < 5e-3, "{mixed} vs {tp}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn clustering_bound_holds(seed in any::<u64>(), dim in 2usize..=4) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(&mut rng, dim, 1.0, Geometry::Thermodynamic).unwrap();
            let ev = Evaluator::new(&p);
            let cb = ev.clustering_bound().unwrap();
            for i in 0..=19 {
                let d = 1.0 + i as f64;
                let v = ev.connected_two_point_at(d).unwrap().norm();
                prop_assert!(v <= cb.bound(d) * (1.0 + 1e-8) + 1e-14, "d={} v={} bound={}", d, v, cb.bound(d));
            }
        }

        #[test]
        fn two_point_is_hermitian_and_continuous(seed in any::<u64>(), dim in 2usize..=4, d in 0.0f64..5.0) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(&mut rng, dim, 1.0, Geometry::Thermodynamic).unwrap();
            let ev = Evaluator::new(&p);
            let forward = ev.two_point_at(d).unwrap();
            let reversed = ev.expectation(&[(0.0, InsertionKind::Annihilate), (d, InsertionKind::Create)]).unwrap();
            prop_assert!((forward - reversed.conj()).norm() < 1e-10 * (1.0 + forward.norm()));
            let n = ev.density().unwrap();
            prop_assert!((ev.two_point_at(0.0).unwrap() - real(n)).norm() < 1e-10 * (1.0 + n));
            // at least linear approach to the density
            let e1 = (ev.two_point_at(1e-3).unwrap() - real(n)).norm();
            let e2 = (ev.two_point_at(5e-4).unwrap() - real(n)).norm();
            prop_assert!(e1 < 1e-12 || e2 < 0.55 * e1, "e1={} e2={}", e1, e2);
        }

        #[test]
        fn kinetic_density_nonnegative(seed in any::<u64>(), dim in 1usize..=4) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(&mut rng, dim, 1.0, Geometry::Thermodynamic).unwrap();
            let ev = Evaluator::new(&p);
            prop_assert!(ev.kinetic_density().unwrap() > -1e-10);
            let g = ev.pair_correlation(&[0.0, 1.0]).unwrap();
            prop_assert!(g.values.iter().all(|v| v.im.abs() < 1e-10));
        }
    }
}
