//! One function per subcommand. Each returns the resolved config (defaults
//! filled in) together with its JSON result and, for grid-valued commands,
//! the CSV rows.

use cmps_core::correlators::{SourceComponent, SourceSlot};
use cmps_core::discretizer::{self, LatticeObservable, StudyObservable};
use cmps_core::general_lindblad;
use cmps_core::liouvillian::PiecewiseProtocol;
use cmps_core::trajectories::{self, Bins, Sampler, SamplerConfig};
use cmps_core::{linalg, CMatrix, CmpsParams, Complex64, Evaluator, Geometry, InsertionKind};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{MatrixConfig, RunConfig};
use crate::output::{CommandOutput, Grid};
use crate::{CliError, Command};

pub fn dispatch(command: Command, cfg: &RunConfig) -> Result<CommandOutput, CliError> {
    let cfg = cfg.resolved();
    match command {
        Command::Steady => steady(cfg),
        Command::Gap => gap(cfg),
        Command::Correlate => correlate(cfg),
        Command::G2 => g2(cfg),
        Command::Kinetic => kinetic(cfg),
        Command::LlEnergy => ll_energy(cfg),
        Command::Discretize => discretize(cfg),
        Command::Converge => converge(cfg),
        Command::Trajectories => trajectories_cmd(cfg),
        Command::LindbladCheck => lindblad_check(cfg),
        Command::ZfunctionalCheck => zfunctional_check(cfg),
        Command::FamilyDeriv => family_deriv(cfg),
    }
}

fn complex(z: Complex64) -> Value {
    json!({"re": z.re, "im": z.im})
}

fn complex_list(zs: &[Complex64]) -> Value {
    json!({
        "re": zs.iter().map(|z| z.re).collect::<Vec<_>>(),
        "im": zs.iter().map(|z| z.im).collect::<Vec<_>>(),
    })
}

fn matrix(m: &CMatrix) -> Value {
    serde_json::to_value(MatrixConfig::from_matrix(m)).expect("plain data")
}

fn unique_steady_state(ev: &Evaluator) -> Result<&cmps_core::SpectralData, CliError> {
    let s = ev.spectral()?;
    if s.degenerate_fixed_space {
        let tol = ev.params().tolerances().zero_eigenvalue;
        return Err(CliError::Numerical(format!(
            "degenerate fixed space: {} eigenvalues with |Re| < {tol:e}",
            s.zero_modes(tol)
        )));
    }
    Ok(s)
}

fn output(config: RunConfig, result: Value, grid: Option<Grid>) -> Result<CommandOutput, CliError> {
    Ok(CommandOutput { config, result, grid })
}

fn separations(cfg: &RunConfig, command: &str) -> Result<Vec<f64>, CliError> {
    let seps = cfg.require(&cfg.separations, "separations", command)?.clone();
    if seps.is_empty() {
        return Err(CliError::Validation("`separations` is empty".into()));
    }
    Ok(seps)
}

fn steady(cfg: RunConfig) -> Result<CommandOutput, CliError> {
    let p = cfg.params()?;
    let ev = Evaluator::new(&p);
    let s = unique_steady_state(&ev)?;
    let rho = &s.steady_state;
    let residual = linalg::max_abs_vec(&ev.liouvillian().apply(&linalg::vectorize(rho)?));
    let rows = |f: fn(&Complex64) -> f64| -> Vec<Vec<f64>> {
        (0..rho.nrows())
            .map(|i| (0..rho.ncols()).map(|j| f(&rho[(i, j)])).collect())
            .collect()
    };
    let mut result = json!({
        "rho_ss": rows(|z| z.re),
        "rho_ss_im": rows(|z| z.im),
        "gap": s.gap,
        "gapless": s.gapless,
        "degenerate_fixed_space": s.degenerate_fixed_space,
        "eigenvalues": complex_list(&s.eigenvalues),
        "residual": residual,
    });
    if let Some(segments) = &cfg.protocol {
        let dim = p.dim();
        let segs = segments
            .iter()
            .enumerate()
            .map(|(i, seg)| {
                Ok((
                    seg.length,
                    seg.k.to_matrix(&format!("protocol[{i}].K"), dim)?,
                    seg.r.to_matrix(&format!("protocol[{i}].R"), dim)?,
                ))
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let protocol = PiecewiseProtocol::new(segs)?;
        let rho0 = match p.geometry() {
            Geometry::Finite { boundary_rho, .. } => boundary_rho.clone(),
            Geometry::Thermodynamic => rho.clone(),
        };
        let rho_final = protocol.evolve(&rho0)?;
        result["protocol_length"] = json!(protocol.total_length());
        result["rho_final"] = matrix(&rho_final);
    }
    output(cfg, result, None)
}

fn gap(cfg: RunConfig) -> Result<CommandOutput, CliError> {
    let p = cfg.params()?;
    let ev = Evaluator::new(&p);
    let s = unique_steady_state(&ev)?;
    let mut result = json!({
        "gap": s.gap,
        "gapless": s.gapless,
        "degenerate_fixed_space": s.degenerate_fixed_space,
        "eigenvalues": complex_list(&s.eigenvalues),
    });
    if p.geometry().is_thermodynamic() && !s.gapless {
        let cb = ev.clustering_bound()?;
        let slow = cb.slow_mode(1e-3);
        result["clustering"] = json!({
            "constant": cb.constant,
            "disconnected": complex(cb.disconnected),
            "slow_eigenvalue": slow.map(|m| complex(m.eigenvalue)),
            "fit_window": cb.fit_window(1e-11).map(|(a, b)| vec![a, b]),
        });
    }
    if let Some(w) = &cfg.window {
        let fit = ev.decay_fit(w.d_min, w.d_max, w.n_points)?;
        result["decay_fit"] = json!({
            "rate": fit.rate,
            "prefactor": fit.prefactor,
            "residual": fit.residual,
            "points_used": fit.points_used,
        });
    }
    output(cfg, result, None)
}

fn grid_output(cfg: RunConfig, res: cmps_core::CorrelatorResult) -> Result<CommandOutput, CliError> {
    let rows = res
        .separations
        .iter()
        .zip(&res.values)
        .map(|(d, v)| vec![*d, v.re, v.im])
        .collect();
    let result = json!({
        "separations": res.separations,
        "values": complex_list(&res.values),
        "normalization": res.normalization,
        "estimator": res.estimator,
    });
    let grid = Grid {
        header: vec!["d", "re", "im"],
        rows,
        notes: vec![("estimator".into(), res.estimator.clone())],
    };
    output(cfg, result, Some(grid))
}

fn correlate(cfg: RunConfig) -> Result<CommandOutput, CliError> {
    let seps = separations(&cfg, "correlate")?;
    let ev = Evaluator::new(&cfg.params()?);
    let res = if cfg.connected.unwrap_or(false) {
        ev.connected_two_point(&seps)?
    } else {
        ev.two_point(&seps)?
    };
    grid_output(cfg, res)
}

fn g2(cfg: RunConfig) -> Result<CommandOutput, CliError> {
    let seps = separations(&cfg, "g2")?;
    let ev = Evaluator::new(&cfg.params()?);
    let res = ev.pair_correlation(&seps)?;
    grid_output(cfg, res)
}

fn kinetic(cfg: RunConfig) -> Result<CommandOutput, CliError> {
    let ev = Evaluator::new(&cfg.params()?);
    let result = json!({
        "kinetic_density": ev.kinetic_density()?,
        "density": ev.density()?,
    });
    output(cfg, result, None)
}

fn ll_energy(cfg: RunConfig) -> Result<CommandOutput, CliError> {
    let c = *cfg.require(&cfg.coupling, "coupling", "ll-energy")?;
    let mu = *cfg.require(&cfg.chemical_potential, "chemical_potential", "ll-energy")?;
    let ev = Evaluator::new(&cfg.params()?);
    let result = json!({
        "energy_density": ev.lieb_liniger_energy_density(c, mu)?,
        "kinetic_density": ev.kinetic_density()?,
        "pair_density": ev.pair_density_coincident()?,
        "density": ev.density()?,
    });
    output(cfg, result, None)
}

fn epsilons(cfg: &RunConfig, command: &str) -> Result<Vec<f64>, CliError> {
    let eps = cfg.require(&cfg.epsilons, "epsilons", command)?.clone();
    if eps.is_empty() {
        return Err(CliError::Validation("`epsilons` is empty".into()));
    }
    Ok(eps)
}

fn discretize(mut cfg: RunConfig) -> Result<CommandOutput, CliError> {
    let eps_list = epsilons(&cfg, "discretize")?;
    let order = *cfg.order.get_or_insert(1);
    let p = cfg.params()?;
    let ev = Evaluator::new(&p);
    let l = ev.liouvillian().matrix().clone();
    let seps = cfg.separations.clone().unwrap_or_default();
    let tol = p.tolerances().fixed_point;
    let rows = eps_list
        .par_iter()
        .map(|&eps| {
            let t = discretizer::lattice_tensors(&p, eps, order)?;
            let tm = discretizer::transfer_matrix(&t);
            let mut obs = vec![LatticeObservable::Occupation];
            obs.extend(seps.iter().map(|&d| LatticeObservable::hopping_at(d, eps)));
            let vals = discretizer::lattice_correlators(&t, &obs, tol)?;
            Ok(json!({
                "eps": eps,
                "defect": tm.defect(&l),
                "trace_defect": tm.trace_defect(),
                "density": vals[0].re,
                "two_point": complex_list(&vals[1..]),
            }))
        })
        .collect::<Result<Vec<_>, cmps_core::CmpsError>>()?;
    let continuum_tp = if seps.is_empty() {
        Vec::new()
    } else {
        ev.two_point(&seps)?.values
    };
    let result = json!({
        "order": order,
        "rows": rows,
        "continuum": {"density": ev.density()?, "two_point": complex_list(&continuum_tp)},
    });
    output(cfg, result, None)
}

fn converge(mut cfg: RunConfig) -> Result<CommandOutput, CliError> {
    let eps_list = epsilons(&cfg, "converge")?;
    let name = cfg.observable.get_or_insert_with(|| "density".into()).clone();
    let observable = match name.as_str() {
        "density" => StudyObservable::Density,
        "two_point" => StudyObservable::TwoPoint(*cfg.distance.get_or_insert(1.0)),
        "pair" => StudyObservable::Pair(*cfg.distance.get_or_insert(1.0)),
        "kinetic" => StudyObservable::Kinetic,
        other => {
            return Err(CliError::Validation(format!(
                "unknown observable `{other}` (density, two_point, pair, kinetic)"
            )))
        }
    };
    // The order-1 kinetic difference diverges; order 2 is the default there.
    let default_order = if matches!(observable, StudyObservable::Kinetic) { 2 } else { 1 };
    let order = *cfg.order.get_or_insert(default_order);
    let p = cfg.params()?;
    let study = discretizer::convergence_study(&p, observable, &eps_list, order)?;
    let ev = Evaluator::new(&p);
    let continuum = match observable {
        StudyObservable::Density => Complex64::new(ev.density()?, 0.0),
        StudyObservable::TwoPoint(d) => ev.two_point_at(d)?,
        StudyObservable::Pair(d) => {
            let n = ev.density()?;
            ev.pair_correlation(&[d])?.values[0] * n * n
        }
        StudyObservable::Kinetic => Complex64::new(ev.kinetic_density()?, 0.0),
    };
    let rows: Vec<Value> = study
        .rows
        .iter()
        .map(|r| {
            json!({
                "eps": r.eps,
                "value": complex(r.value),
                "error": r.error,
                "error_vs_continuum": (r.value - continuum).norm(),
            })
        })
        .collect();
    let result = json!({
        "observable": name,
        "order": order,
        "rows": rows,
        "extrapolated": complex(study.extrapolated),
        "empirical_orders": study.orders,
        "empirical_order": study.order,
        "continuum": complex(continuum),
    });
    output(cfg, result, None)
}

fn trajectories_cmd(mut cfg: RunConfig) -> Result<CommandOutput, CliError> {
    let n_traj = *cfg.require(&cfg.n_traj, "n_traj", "trajectories")?;
    let seed = *cfg.require(&cfg.seed, "seed", "trajectories")?;
    let edges = cfg.require(&cfg.bins, "bins", "trajectories")?.clone();
    let bins = Bins::new(edges)?;
    if n_traj < 2 {
        return Err(CliError::Validation("`n_traj` must be at least 2".into()));
    }
    let p = cfg.params()?;
    let dt = *cfg.dt.get_or_insert(trajectories::max_step(&p).min(0.0025));
    // Thermodynamic trajectories start from an unraveling of the steady
    // state, so no burn-in is needed by default.
    let burn_in = *cfg.burn_in.get_or_insert(0.0);
    let sim_length = match (cfg.sim_length, p.geometry()) {
        (Some(l), _) => l,
        (None, Geometry::Finite { length, .. }) => *length,
        (None, Geometry::Thermodynamic) => {
            let ev = Evaluator::new(&p);
            let s = unique_steady_state(&ev)?;
            if s.gapless {
                return Err(CliError::Numerical(
                    "gapless state: set `sim_length` explicitly".into(),
                ));
            }
            burn_in + 50.0 / s.gap
        }
    };
    cfg.sim_length = Some(sim_length);
    let sampler = Sampler::new(&p, &SamplerConfig::new(sim_length, dt, seed))?;
    let records = sampler.ensemble(n_traj)?;
    let length = sampler.length();
    let stats = trajectories::estimate_stats(&records, length, burn_in, &bins)?;
    let window = stats.total_length;

    let thermo = p.geometry().is_thermodynamic();
    let ev = Evaluator::new(&p);
    let density = if thermo { Some(ev.density()?) } else { None };
    let g2_analytic = if thermo && density.is_some_and(|n| n > 0.0) {
        Some(trajectories::binned_pair_correlation(&p, &bins, window)?)
    } else {
        None
    };
    let waiting_analytic = if thermo {
        Some(trajectories::binned_waiting_time(&p, &bins, window)?)
    } else {
        None
    };
    let centers = bins.centers();
    let rows: Vec<Vec<f64>> = (0..bins.count())
        .map(|k| vec![centers[k], stats.g2[k], 0.0, stats.g2_stderr[k]])
        .collect();
    let result = json!({
        "n_traj": stats.n_traj,
        "window_length": window,
        "rate": stats.rate,
        "rate_stderr": stats.rate_stderr,
        "density": density,
        "bin_edges": bins.edges,
        "g2": stats.g2,
        "g2_stderr": stats.g2_stderr,
        "g2_analytic": g2_analytic,
        "waiting": stats.waiting,
        "waiting_stderr": stats.waiting_stderr,
        "waiting_analytic": waiting_analytic,
        "jumps_total": records.iter().map(|r| r.positions.len()).sum::<usize>(),
    });
    let grid = Grid {
        header: vec!["d", "re", "im", "stderr"],
        rows,
        notes: vec![
            ("rate".into(), format!("{:?}", stats.rate)),
            ("rate_stderr".into(), format!("{:?}", stats.rate_stderr)),
        ],
    };
    output(cfg, result, Some(grid))
}

fn lindblad_check(cfg: RunConfig) -> Result<CommandOutput, CliError> {
    let moments = cfg.require(&cfg.moments, "moments", "lindblad-check")?.moments()?;
    let p = cfg.params()?;
    let cmp = general_lindblad::compare_forms(p.k(), p.r(), &moments)?;
    let vacuum = general_lindblad::liouvillian_difference(p.k(), p.r())?;
    let result = json!({
        "diagonal_moments": moments.is_diagonal(),
        "max_difference": cmp.max_difference,
        "trace_defect_generator": cmp.trace_defect_generator,
        "trace_defect_jump_form": cmp.trace_defect_jump_form,
        "choi_min_generator": cmp.choi_min_generator,
        "choi_min_jump_form": cmp.choi_min_jump_form,
        "vacuum_reduction_difference": vacuum,
    });
    output(cfg, result, None)
}

fn zfunctional_check(mut cfg: RunConfig) -> Result<CommandOutput, CliError> {
    let eps_list = epsilons(&cfg, "zfunctional-check")?;
    let steps = cfg.steps.get_or_insert_with(|| vec![0.1]).clone();
    let seps = cfg.separations.get_or_insert_with(|| vec![1.0]).clone();
    let p = cfg.params()?;
    let ev = Evaluator::new(&p);
    let d_max = seps.iter().copied().fold(0.0, f64::max);
    let (base, total) = match p.geometry() {
        Geometry::Thermodynamic => (1.0, 1.0 + d_max + 1.0),
        Geometry::Finite { length, .. } => (0.25 * length, *length),
    };
    if base + d_max >= total && !p.geometry().is_thermodynamic() {
        return Err(CliError::Validation(format!(
            "separations up to {d_max} do not fit after x = {base} in length {total}"
        )));
    }
    let mut rows = Vec::new();
    for &eps in &eps_list {
        let sites = match p.geometry() {
            Geometry::Thermodynamic => (total / eps).ceil() as usize,
            Geometry::Finite { length, .. } => (length / eps).round() as usize,
        };
        let a = (base / eps).floor() as usize;
        let xa = (a as f64 + 0.5) * eps;
        let psi = ev.expectation(&[(xa, InsertionKind::Annihilate)])?;
        for &h in &steps {
            let first = ev.functional_derivative(
                eps,
                sites,
                &[SourceSlot::new(a, SourceComponent::Lambda)],
                h,
            )?;
            let mut mixed = Vec::new();
            for &d in &seps {
                let b = a + (d / eps).round() as usize;
                let xb = (b as f64 + 0.5) * eps;
                let value = ev.functional_derivative(
                    eps,
                    sites,
                    &[
                        SourceSlot::new(a, SourceComponent::LambdaBar),
                        SourceSlot::new(b, SourceComponent::Lambda),
                    ],
                    h,
                )?;
                let exact = ev.expectation(&[(xa, InsertionKind::Create), (xb, InsertionKind::Annihilate)])?;
                mixed.push(json!({
                    "d": xb - xa,
                    "value": complex(value),
                    "expectation": complex(exact),
                    "error": (value - exact).norm(),
                }));
            }
            rows.push(json!({
                "eps": eps,
                "h": h,
                "first": {"value": complex(first), "expectation": complex(psi), "error": (first - psi).norm()},
                "mixed": mixed,
            }));
        }
    }
    output(cfg, json!({"rows": rows}), None)
}

fn family_deriv(mut cfg: RunConfig) -> Result<CommandOutput, CliError> {
    let pert = cfg.require(&cfg.perturbation, "perturbation", "family-deriv")?.clone();
    let ins_cfg = cfg.require(&cfg.insertions, "insertions", "family-deriv")?.clone();
    let steps = cfg
        .steps
        .get_or_insert_with(|| vec![1e-2, 5e-3, 2.5e-3])
        .clone();
    let p = cfg.params()?;
    let dk = pert.dk.to_matrix("dK", p.dim())?;
    let dr = pert.dr.to_matrix("dR", p.dim())?;
    let insertions = ins_cfg
        .iter()
        .map(|i| {
            InsertionKind::parse(&i.kind)
                .map(|k| (i.position, k))
                .ok_or_else(|| CliError::Validation(format!("unknown insertion kind `{}`", i.kind)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let ev = Evaluator::new(&p);
    let exact = ev.family_derivative(&dk, &dr, &insertions)?;
    let value_at = |t: f64| -> Result<Complex64, CliError> {
        let q: CmpsParams = p.perturbed(&dk, &dr, t)?;
        Ok(Evaluator::new(&q).expectation(&insertions)?)
    };
    let mut rows = Vec::new();
    for &h in &steps {
        let fd = (value_at(h)? - value_at(-h)?) / (2.0 * h);
        rows.push(json!({"h": h, "finite_difference": complex(fd), "error": (fd - exact).norm()}));
    }
    let result = json!({
        "derivative": complex(exact),
        "value": complex(ev.expectation(&insertions)?),
        "finite_differences": rows,
    });
    output(cfg, result, None)
}
