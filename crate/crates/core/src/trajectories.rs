//! Quantum-jump unraveling of the boundary dynamics.
//!
//! A trajectory evolves a pure boundary state with the no-jump propagator
//! `e^{Q dt}` and, with probability `p = dt ⟨φ|R†R|φ⟩` per step, jumps
//! `φ → Rφ/‖Rφ‖`. A jump in step `[k dt, (k+1) dt)` is recorded at the
//! midpoint `(k + ½) dt`. Jump positions are the "photon counts" whose
//! statistics reproduce the bulk correlators.
//!
//! Randomness: trajectory `i` of master seed `s` draws from
//! `ChaCha8Rng::seed_from_u64(s)` switched to stream `i`, so records do not
//! depend on thread scheduling or on which other trajectories are sampled.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::correlators::Evaluator;
use crate::error::{CmpsError, Result};
use crate::linalg::{self, CMatrix, CVector, ZERO};
use crate::params::{CmpsParams, Geometry};

#[derive(Debug, Clone, PartialEq)]
pub struct JumpRecord {
    /// Strictly ascending jump positions in `[0, L_sim]`.
    pub positions: Vec<f64>,
    /// Normalized boundary state at `L_sim`.
    pub final_state: CVector,
    /// `(master seed, trajectory index)`.
    pub seed_info: (u64, u64),
    /// Normalized states at the requested snapshot positions.
    pub snapshots: Vec<CVector>,
}

/// Sampling controls shared by every trajectory of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub length: f64,
    pub dt: f64,
    pub master_seed: u64,
    /// Initial mixed state, sampled through its eigendecomposition. Defaults
    /// to the steady state (thermodynamic) or the boundary state (finite).
    pub initial: Option<CMatrix>,
    pub snapshot_positions: Vec<f64>,
}

impl SamplerConfig {
    pub fn new(length: f64, dt: f64, master_seed: u64) -> Self {
        Self {
            length,
            dt,
            master_seed,
            initial: None,
            snapshot_positions: Vec::new(),
        }
    }
}

/// Precomputed propagators for one parameter set and step.
pub struct Sampler {
    r: CMatrix,
    rdr: CMatrix,
    no_jump: CMatrix,
    steps: usize,
    dt: f64,
    master_seed: u64,
    initial: (Vec<f64>, Vec<CVector>),
    snapshot_steps: Vec<usize>,
}

/// Largest stable step `0.01 / max(1, ‖R†R‖)`.
pub fn max_step(params: &CmpsParams) -> f64 {
    let rdr = params.r().adjoint() * params.r();
    let norm = linalg::hermitian_eigenvalues(&linalg::hermitize(&rdr))
        .last()
        .copied()
        .unwrap_or(0.0);
    0.01 / norm.max(1.0)
}

impl Sampler {
    pub fn new(params: &CmpsParams, cfg: &SamplerConfig) -> Result<Self> {
        let bound = max_step(params);
        if !(cfg.dt > 0.0) {
            return Err(CmpsError::StepNotPositive(cfg.dt));
        }
        if cfg.dt > bound * (1.0 + 1e-12) {
            return Err(CmpsError::StepTooLarge { dt: cfg.dt, bound });
        }
        if !(cfg.length > 0.0 && cfg.length.is_finite()) {
            return Err(CmpsError::InvalidArgument(format!(
                "trajectory length must be positive, got {}",
                cfg.length
            )));
        }
        let initial = match &cfg.initial {
            Some(rho) => {
                crate::params::validate_density_matrix(rho, 1e-10)?;
                rho.clone()
            }
            None => match params.geometry() {
                Geometry::Thermodynamic => {
                    Evaluator::new(params).spectral()?.steady_state.clone()
                }
                Geometry::Finite { boundary_rho, .. } => boundary_rho.clone(),
            },
        };
        let (weights, vectors) = linalg::hermitian_eigen(&linalg::hermitize(&initial));
        let initial = (
            weights.iter().map(|w| w.max(0.0)).collect(),
            (0..vectors.ncols()).map(|j| vectors.column(j).into_owned()).collect(),
        );
        let steps = (cfg.length / cfg.dt).round() as usize;
        let snapshot_steps = cfg
            .snapshot_positions
            .iter()
            .map(|x| {
                if !(0.0..=cfg.length).contains(x) {
                    Err(CmpsError::PositionOutOfRange {
                        position: *x,
                        length: cfg.length,
                    })
                } else {
                    Ok((x / cfg.dt).round() as usize)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let q = params.q();
        Ok(Self {
            r: params.r().clone(),
            rdr: params.r().adjoint() * params.r(),
            no_jump: linalg::expm(&q.map(|z| z * cfg.dt)),
            steps,
            dt: cfg.dt,
            master_seed: cfg.master_seed,
            initial,
            snapshot_steps,
        })
    }

    fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(index);
        rng
    }

    pub fn sample(&self, index: u64) -> Result<JumpRecord> {
        let mut rng = self.rng(index);
        let (weights, vectors) = &self.initial;
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = weights.len() - 1;
        for (k, w) in weights.iter().enumerate() {
            if u < *w {
                pick = k;
                break;
            }
            u -= w;
        }
        let mut phi = vectors[pick].clone();
        let mut next = CVector::zeros(phi.len());
        let mut tmp = CVector::zeros(phi.len());
        let one = Complex64::new(1.0, 0.0);
        let mut positions = Vec::new();
        let mut snapshots = vec![CVector::zeros(0); self.snapshot_steps.len()];
        let take = |k: usize, phi: &CVector, snaps: &mut Vec<CVector>| {
            for (slot, &s) in self.snapshot_steps.iter().enumerate() {
                if s == k {
                    snaps[slot] = phi.clone();
                }
            }
        };
        take(0, &phi, &mut snapshots);
        for k in 0..self.steps {
            tmp.gemv(one, &self.rdr, &phi, ZERO);
            let p = self.dt * phi.dotc(&tmp).re;
            let jump = rng.random::<f64>() < p;
            if jump {
                next.gemv(one, &self.r, &phi, ZERO);
                positions.push((k as f64 + 0.5) * self.dt);
            } else {
                next.gemv(one, &self.no_jump, &phi, ZERO);
            }
            let norm = next.norm();
            if !(norm > 1e-300) || !norm.is_finite() {
                return Err(CmpsError::NonNormalizableState);
            }
            next.unscale_mut(norm);
            std::mem::swap(&mut phi, &mut next);
            take(k + 1, &phi, &mut snapshots);
        }
        Ok(JumpRecord {
            positions,
            final_state: phi,
            seed_info: (self.master_seed, index),
            snapshots,
        })
    }

    /// Trajectories `0..n`, sampled in parallel and returned in index order.
    pub fn ensemble(&self, n: usize) -> Result<Vec<JumpRecord>> {
        (0..n as u64).into_par_iter().map(|i| self.sample(i)).collect()
    }

    pub fn length(&self) -> f64 {
        self.steps as f64 * self.dt
    }
}

pub fn sample_trajectory(
    params: &CmpsParams,
    length: f64,
    dt: f64,
    master_seed: u64,
    index: u64,
) -> Result<JumpRecord> {
    Sampler::new(params, &SamplerConfig::new(length, dt, master_seed))?.sample(index)
}

pub fn sample_ensemble(params: &CmpsParams, cfg: &SamplerConfig, n_traj: usize) -> Result<Vec<JumpRecord>> {
    Sampler::new(params, cfg)?.ensemble(n_traj)
}

/// Histogram edges `edges[0] < edges[1] < ...` for pair separations and
/// waiting times.
#[derive(Debug, Clone, PartialEq)]
pub struct Bins {
    pub edges: Vec<f64>,
}

impl Bins {
    pub fn uniform(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if !(hi > lo && lo >= 0.0 && count >= 1) {
            return Err(CmpsError::InvalidArgument(format!(
                "bad bins [{lo}, {hi}] x {count}"
            )));
        }
        Ok(Self {
            edges: (0..=count)
                .map(|i| lo + (hi - lo) * i as f64 / count as f64)
                .collect(),
        })
    }

    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 || edges[0] < 0.0 || edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(CmpsError::InvalidArgument(
                "bin edges must be nonnegative and strictly increasing".into(),
            ));
        }
        Ok(Self { edges })
    }

    pub fn count(&self) -> usize {
        self.edges.len() - 1
    }

    fn locate(&self, x: f64) -> Option<usize> {
        if x < self.edges[0] || x >= *self.edges.last().unwrap() {
            return None;
        }
        let k = self.edges.partition_point(|&e| e <= x);
        Some(k - 1)
    }

    /// `∫_bin (T - s) ds`, the number of available ordered pairs per unit
    /// density squared at separation `s` in a window of length `T`.
    fn exposure(&self, k: usize, window: f64) -> f64 {
        let (a, b) = (self.edges[k], self.edges[k + 1].min(window));
        if b <= a {
            return 0.0;
        }
        window * (b - a) - 0.5 * (b * b - a * a)
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStats {
    pub n_traj: usize,
    /// Length of the analysed window after burn-in.
    pub total_length: f64,
    pub rate: f64,
    pub rate_stderr: f64,
    pub bins: Bins,
    /// `g₂` estimate per bin (NaN if no jumps were seen).
    pub g2: Vec<f64>,
    pub g2_stderr: Vec<f64>,
    /// Waiting-time density per bin, normalized per jump.
    pub waiting: Vec<f64>,
    pub waiting_stderr: Vec<f64>,
}

struct Moments {
    mean_a: f64,
    mean_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
}

fn moments(a: &[f64], b: &[f64]) -> Moments {
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for (x, y) in a.iter().zip(b) {
        var_a += (x - mean_a).powi(2);
        var_b += (y - mean_b).powi(2);
        cov += (x - mean_a) * (y - mean_b);
    }
    let dof = n - 1.0;
    Moments {
        mean_a,
        mean_b,
        var_a: var_a / dof,
        var_b: var_b / dof,
        cov: cov / dof,
    }
}

/// Rate, pair-correlation and waiting-time estimates from jump records,
/// discarding jumps before `burn_in`.
///
/// Per trajectory `i` with window length `T`: `b_i = N_i / T`; for each bin
/// `a_ik = c_ik / ∫_bin (T-s) ds` with `c_ik` the number of ordered jump
/// pairs whose separation falls in the bin. Then `g₂_k = ā_k / b̄²` and the
/// waiting density is `w_k = ā'_k / b̄` with `c'` counting consecutive pairs
/// only. Standard errors use the delta method on the between-trajectory
/// covariance of `(a, b)`.
pub fn estimate_stats(records: &[JumpRecord], length: f64, burn_in: f64, bins: &Bins) -> Result<TrajectoryStats> {
    if records.len() < 2 {
        return Err(CmpsError::InsufficientData(format!(
            "{} trajectories, need at least 2",
            records.len()
        )));
    }
    let window = length - burn_in;
    if !(window > 0.0) || burn_in < 0.0 {
        return Err(CmpsError::InsufficientData(format!(
            "burn-in {burn_in} leaves no data in length {length}"
        )));
    }
    let nb = bins.count();
    let exposure: Vec<f64> = (0..nb).map(|k| bins.exposure(k, window)).collect();
    let d_max = *bins.edges.last().unwrap();

    let per_traj: Vec<(f64, Vec<f64>, Vec<f64>)> = records
        .par_iter()
        .map(|rec| {
            let jumps: Vec<f64> = rec.positions.iter().copied().filter(|&x| x >= burn_in).collect();
            let mut pairs = vec![0.0; nb];
            let mut waits = vec![0.0; nb];
            for (i, &x) in jumps.iter().enumerate() {
                for (j, &y) in jumps[i + 1..].iter().enumerate() {
                    let s = y - x;
                    if s >= d_max {
                        break;
                    }
                    if let Some(k) = bins.locate(s) {
                        pairs[k] += 1.0;
                        if j == 0 {
                            waits[k] += 1.0;
                        }
                    }
                }
            }
            (jumps.len() as f64 / window, pairs, waits)
        })
        .collect();

    let n = records.len() as f64;
    let b: Vec<f64> = per_traj.iter().map(|t| t.0).collect();
    let rate = b.iter().sum::<f64>() / n;
    let rate_var = b.iter().map(|x| (x - rate).powi(2)).sum::<f64>() / (n - 1.0);
    let rate_stderr = (rate_var / n).sqrt();

    let mut g2 = vec![f64::NAN; nb];
    let mut g2_stderr = vec![f64::NAN; nb];
    let mut waiting = vec![f64::NAN; nb];
    let mut waiting_stderr = vec![f64::NAN; nb];
    if rate > 0.0 {
        for k in 0..nb {
            if exposure[k] <= 0.0 {
                continue;
            }
            let a: Vec<f64> = per_traj.iter().map(|t| t.1[k] / exposure[k]).collect();
            let m = moments(&a, &b);
            let (aa, bb) = (m.mean_a, m.mean_b);
            g2[k] = aa / (bb * bb);
            let var = m.var_a / bb.powi(4) + 4.0 * aa * aa * m.var_b / bb.powi(6)
                - 4.0 * aa * m.cov / bb.powi(5);
            g2_stderr[k] = (var.max(0.0) / n).sqrt();

            let w: Vec<f64> = per_traj.iter().map(|t| t.2[k] / exposure[k]).collect();
            let m = moments(&w, &b);
            let (aa, bb) = (m.mean_a, m.mean_b);
            waiting[k] = aa / bb;
            let var = m.var_a / (bb * bb) + aa * aa * m.var_b / bb.powi(4)
                - 2.0 * aa * m.cov / bb.powi(3);
            waiting_stderr[k] = (var.max(0.0) / n).sqrt();
        }
    }
    Ok(TrajectoryStats {
        n_traj: records.len(),
        total_length: window,
        rate,
        rate_stderr,
        bins: bins.clone(),
        g2,
        g2_stderr,
        waiting,
        waiting_stderr,
    })
}

/// Post-jump conditional state `RρR†/tr(RρR†)`, if the jump rate is nonzero.
pub fn post_jump_state(r: &CMatrix, rho: &CMatrix) -> Option<CMatrix> {
    let m = r * rho * r.adjoint();
    let tr = m.trace().re;
    (tr > 0.0).then(|| m.map(|z| z / tr))
}

/// `w(τ) = tr(R e^{Qτ} ρ₀ e^{Q†τ} R†) = -dS/dτ` with survival
/// `S(τ) = tr(e^{Qτ} ρ₀ e^{Q†τ})`.
///
/// Without an explicit `ρ₀` the thermodynamic default is the state right
/// after a steady-state jump, matching the empirical waiting histogram; the
/// finite default is the boundary state.
pub fn waiting_time_analytic(params: &CmpsParams, rho0: Option<&CMatrix>, taus: &[f64]) -> Result<Vec<f64>> {
    let rho0 = match rho0 {
        Some(r) => r.clone(),
        None => match params.geometry() {
            Geometry::Thermodynamic => {
                let ss = Evaluator::new(params).spectral()?.steady_state.clone();
                match post_jump_state(params.r(), &ss) {
                    Some(p) => p,
                    None => return Ok(vec![0.0; taus.len()]),
                }
            }
            Geometry::Finite { boundary_rho, .. } => boundary_rho.clone(),
        },
    };
    let q = params.q();
    let r = params.r();
    taus.par_iter()
        .map(|&tau| {
            if tau < 0.0 {
                return Err(CmpsError::NegativeDistance(tau));
            }
            let u = linalg::expm(&q.map(|z| z * tau));
            let ru = r * u;
            Ok((&ru * &rho0 * ru.adjoint()).trace().re)
        })
        .collect()
}

/// Exposure-weighted bin averages `∫_bin f(s)(T-s) ds / ∫_bin (T-s) ds` of
/// an analytic curve, for comparison with [`estimate_stats`].
pub fn bin_average<F>(bins: &Bins, window: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    const NODES: usize = 16;
    let mut grid = Vec::with_capacity(bins.count() * (NODES + 1));
    for k in 0..bins.count() {
        let (a, b) = (bins.edges[k], bins.edges[k + 1]);
        for j in 0..=NODES {
            grid.push(a + (b - a) * j as f64 / NODES as f64);
        }
    }
    let values = f(&grid)?;
    Ok((0..bins.count())
        .map(|k| {
            let pts = &grid[k * (NODES + 1)..(k + 1) * (NODES + 1)];
            let vals = &values[k * (NODES + 1)..(k + 1) * (NODES + 1)];
            let mut num = 0.0;
            let mut den = 0.0;
            for j in 0..=NODES {
                let w = if j == 0 || j == NODES {
                    1.0
                } else if j % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                let expo = (window - pts[j]).max(0.0);
                num += w * vals[j] * expo;
                den += w * expo;
            }
            num / den
        })
        .collect())
}

/// Insertion-calculus `g₂` averaged over each bin.
pub fn binned_pair_correlation(params: &CmpsParams, bins: &Bins, window: f64) -> Result<Vec<f64>> {
    let ev = Evaluator::new(params);
    bin_average(bins, window, |grid| {
        Ok(ev.pair_correlation(grid)?.values.iter().map(|z| z.re).collect())
    })
}

/// Analytic waiting-time density averaged over each bin.
pub fn binned_waiting_time(params: &CmpsParams, bins: &Bins, window: f64) -> Result<Vec<f64>> {
    bin_average(bins, window, |grid| waiting_time_analytic(params, None, grid))
}

/// Ensemble average of `|φ⟩⟨φ|` at each snapshot position.
pub fn snapshot_average(records: &[JumpRecord], slot: usize) -> Result<CMatrix> {
    let Some(first) = records.first() else {
        return Err(CmpsError::InsufficientData("no records".into()));
    };
    let d = first.final_state.len();
    let mut acc = CMatrix::zeros(d, d);
    for rec in records {
        let phi = rec.snapshots.get(slot).ok_or_else(|| {
            CmpsError::InvalidArgument(format!("snapshot slot {slot} was not recorded"))
        })?;
        acc += phi * phi.adjoint();
    }
    Ok(acc.map(|z| z / records.len() as f64))
}
