//! Subcommand implementations. Each writes its tables into the output
//! directory and returns a JSON summary for the sidecar.

use std::sync::Arc;

use serde_json::{json, Value};
use srflab::ensemble::map_replicas;
use srflab::expansion::{coupled_error_study, solve_phi0, ExpansionConfig};
use srflab::gff::{mode_coefficients, GffSampler};
use srflab::gmc::{cauchy_diagnostic, GmcBuilder, MassEnsemble};
use srflab::lattice::{grad_inner, ScalarField, TorusGeometry};
use srflab::rng::{Domain, StreamKey};
use srflab::srf::{RunStatus, Simulator, TrajectoryRecord};
use srflab::stats::{mean, neumaier_sum, std_error};
use srflab::totalmass::{
    classify_boundary, hitting_cdf, laplace_oracle, simulate_mass_with, MassSdeConfig, SimOptions,
};
use srflab::verify::{
    covariation_regression, ibp_catalog, qv_drift_regression, reference_catalog, IbpSetup,
};

use crate::config::{ConfigError, ExperimentConfig, InitialKind};
use crate::io::{num, OutputDir};
use crate::CliError;

pub type Summary = Value;

pub fn sample_gff(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Summary, CliError> {
    let g = cfg.geometry()?;
    let sampler = GffSampler::new(g.clone(), cfg.physics.sigma, cfg.run.seed)?;
    let modes = lowest_modes(&g, 8);
    let n = cfg.run.replicas;
    let power: Vec<Vec<f64>> = map_replicas(n, |i| {
        let c = mode_coefficients(&sampler.sample(i as u64));
        modes.iter().map(|&k| c[k].norm_sqr()).collect()
    });
    let mut t = out.csv(
        "gff_modes.csv",
        "gff-modes",
        &["a", "b", "eigenvalue", "empirical", "stderr", "theory"],
    )?;
    for (j, &k) in modes.iter().enumerate() {
        let xs: Vec<f64> = power.iter().map(|p| p[j]).collect();
        let (a, b) = g.signed_mode(k);
        let l = g.eigenvalues()[k];
        let s = sampler.mode_std(k);
        t.row([
            a.to_string(),
            b.to_string(),
            num(l),
            num(mean(&xs)),
            num(std_error(&xs)),
            num(s * s),
        ])?;
    }
    t.finish()?;
    out.grid("gff_sample.bin", &sampler.sample(0), "phi")?;
    Ok(json!({ "samples": n, "modes": modes.len() }))
}

fn lowest_modes(g: &TorusGeometry, k: usize) -> Vec<usize> {
    let mut modes: Vec<usize> = (1..g.len())
        .filter(|&i| {
            let (a, b) = g.signed_mode(i);
            a > 0 || (a == 0 && b > 0)
        })
        .collect();
    modes.sort_by(|&x, &y| {
        g.eigenvalues()[x]
            .total_cmp(&g.eigenvalues()[y])
            .then(x.cmp(&y))
    });
    modes.truncate(k);
    modes
}

pub fn build_gmc(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Summary, CliError> {
    let g = cfg.geometry()?;
    let m = cfg.mollifier(&g);
    let sigma = cfg.physics.sigma;
    if let Err(srflab::Error::Unresolvable { min, .. }) = m.halved().validate(&g) {
        return Err(ConfigError::Invalid {
            parameter: "eps".into(),
            bound: format!(
                "eps >= {} for build-gmc, which also samples at eps/2 (got {})",
                2.0 * min,
                cfg.scheme.eps
            ),
        }
        .into());
    }
    let ens = MassEnsemble::sample(g.clone(), sigma, m, cfg.run.replicas, cfg.run.seed)?;
    let mut t = out.csv(
        "gmc_totals.csv",
        "gmc-totals",
        &["replica", "total", "total_half"],
    )?;
    for (i, (a, b)) in ens.totals.iter().zip(&ens.totals_half).enumerate() {
        t.row([i.to_string(), num(*a), num(*b)])?;
    }
    t.finish()?;

    let sampler = GffSampler::new(g.clone(), sigma, cfg.run.seed)?;
    let phi = sampler.sample(0);
    let measure = GmcBuilder::new(g.clone(), sigma, m)?.build(&phi)?;
    let density = ScalarField::from_values(
        g.clone(),
        measure.masses().iter().map(|w| w / g.cell_area()).collect(),
    );
    out.grid("gmc_density.bin", &density, "mass per unit area")?;

    let mut levels = 0;
    let mut e = m;
    while e.validate(&g).is_ok() && levels < 8 {
        levels += 1;
        e = e.halved();
    }
    let one = ScalarField::constant(g.clone(), 1.0);
    let mut t = out.csv(
        "gmc_cauchy.csv",
        "gmc-cauchy",
        &["eps", "total", "increment"],
    )?;
    for p in cauchy_diagnostic(&phi, &one, sigma, &m, levels.max(1))? {
        t.row([
            num(p.eps),
            num(p.value),
            p.increment.map(num).unwrap_or_default(),
        ])?;
    }
    t.finish()?;
    Ok(json!({
        "mean_total": mean(&ens.totals),
        "stderr_total": std_error(&ens.totals),
        "area": g.area(),
    }))
}

/// Initial field with total mass `a0` at the configured scale.
fn initial_field(
    cfg: &ExperimentConfig,
    g: &Arc<TorusGeometry>,
    builder: &GmcBuilder,
    replica: u64,
) -> Result<ScalarField, CliError> {
    let phi = match cfg.run.initial {
        InitialKind::Gff => {
            GffSampler::new(g.clone(), cfg.physics.sigma, cfg.run.seed)?.sample_with_key(
                StreamKey::new(cfg.run.seed, Domain::InitialField, replica, 0),
            )
        }
        InitialKind::Smooth => ScalarField::mode(g.clone(), 1, 0, 0.0).scaled(cfg.run.amplitude),
    };
    let m0 = neumaier_sum(builder.masses(0.0, phi.zero_mean_values()));
    Ok(phi.zero_mean_part().with_mean(0.5 * (cfg.run.a0 / m0).ln()))
}

fn run_ensemble(cfg: &ExperimentConfig) -> Result<(Vec<TrajectoryRecord>, Simulator), CliError> {
    let g = cfg.geometry()?;
    let scfg = cfg.srf_config(&g);
    let sim = Simulator::new(scfg.clone(), g.clone())?;
    let builder = GmcBuilder::new(g.clone(), scfg.sigma, scfg.mollifier)?;
    let inits: Vec<ScalarField> = (0..cfg.run.replicas)
        .map(|r| initial_field(cfg, &g, &builder, r as u64))
        .collect::<Result<_, _>>()?;
    let recs: Vec<Result<TrajectoryRecord, srflab::Error>> = map_replicas(cfg.run.replicas, |r| {
        sim.run_trajectory(&inits[r], cfg.run.seed, r as u64)
    });
    let recs = recs.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok((recs, sim))
}

fn status_name(s: RunStatus) -> &'static str {
    match s {
        RunStatus::Completed => "completed",
        RunStatus::Absorbed => "absorbed",
        RunStatus::BlowUp => "blow-up",
    }
}

fn write_trajectories(out: &mut OutputDir, recs: &[TrajectoryRecord]) -> Result<(), CliError> {
    let nobs = recs[0].observable_names.len();
    let mut header = vec!["replica".to_string(), "t".into(), "status".into()];
    header.extend((0..nobs).map(|j| format!("A_{j}")));
    header.extend((0..nobs).map(|j| format!("drift_{j}")));
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut t = out.csv("srf_trajectory.csv", "srf-trajectory", &h)?;
    for r in recs {
        for (k, &time) in r.times.iter().enumerate() {
            let last = k + 1 == r.times.len();
            let status = if last {
                status_name(r.status)
            } else {
                "running"
            };
            let mut row = vec![r.replica.to_string(), num(time), status.to_string()];
            row.extend((0..nobs).map(|j| num(r.values[j][k])));
            row.extend((0..nobs).map(|j| num(r.drift[j][k])));
            t.row(row)?;
        }
    }
    t.finish()?;
    let mut t = out.csv(
        "srf_windows.csv",
        "srf-windows",
        &[
            "replica",
            "window",
            "observable",
            "t0",
            "t1",
            "steps",
            "increment",
            "start_drift",
            "drift_integral",
            "realized_qv",
            "raw_qv",
            "qv_integral",
        ],
    )?;
    for r in recs {
        for (w, win) in r.windows.iter().enumerate() {
            for j in 0..nobs {
                t.row([
                    r.replica.to_string(),
                    w.to_string(),
                    j.to_string(),
                    num(win.t0),
                    num(win.t1),
                    win.steps.to_string(),
                    num(r.values[j][w + 1] - r.values[j][w]),
                    num(win.start_drift[j]),
                    num(win.drift_integral[j]),
                    num(win.realized_qv[j]),
                    num(win.raw_qv[j]),
                    num(win.qv_integral[j]),
                ])?;
            }
        }
    }
    t.finish()?;
    Ok(())
}

fn status_counts(recs: &[TrajectoryRecord]) -> Value {
    let count = |s| recs.iter().filter(|r| r.status == s).count();
    json!({
        "completed": count(RunStatus::Completed),
        "absorbed": count(RunStatus::Absorbed),
        "blow_up": count(RunStatus::BlowUp),
    })
}

pub fn run_srf(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<(Summary, bool), CliError> {
    let (recs, sim) = run_ensemble(cfg)?;
    write_trajectories(out, &recs)?;
    let summary = json!({
        "observables": recs[0].observable_names,
        "status": status_counts(&recs),
        "mean_final_total_mass": mean(&recs.iter().map(|r| r.final_total_mass()).collect::<Vec<_>>()),
        "absorption_threshold": sim.config().absorption_threshold(sim.geometry()),
    });
    let blew_up = recs.iter().any(|r| r.status == RunStatus::BlowUp);
    Ok((summary, blew_up))
}

pub fn verify_qv(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<(Summary, bool), CliError> {
    let (recs, _) = run_ensemble(cfg)?;
    write_trajectories(out, &recs)?;
    let nobs = recs[0].observable_names.len();
    let mut t = out.csv(
        "qv_regression.csv",
        "qv-regression",
        &[
            "observable",
            "label",
            "qv_slope",
            "qv_stderr",
            "qv_ols_slope",
            "qv_ols_stderr",
            "qv_ols_intercept",
            "qv_ols_intercept_stderr",
            "drift_slope",
            "drift_stderr",
            "replicas",
            "windows",
        ],
    )?;
    let mut reports = Vec::new();
    for j in 0..nobs {
        let r = qv_drift_regression(&recs, j)?;
        t.row([
            j.to_string(),
            r.observable.clone(),
            num(r.qv_ratio.value),
            num(r.qv_ratio.stderr),
            num(r.qv_fit.slope.value),
            num(r.qv_fit.slope.stderr),
            num(r.qv_fit.intercept.value),
            num(r.qv_fit.intercept.stderr),
            num(r.drift_iv.value),
            num(r.drift_iv.stderr),
            r.replicas.to_string(),
            r.windows.to_string(),
        ])?;
        reports.push(r);
    }
    t.finish()?;
    let mut t = out.csv(
        "qv_covariation.csv",
        "qv-covariation",
        &[
            "i",
            "j",
            "slope",
            "stderr",
            "realized",
            "realized_stderr",
            "predicted",
        ],
    )?;
    for &(i, j) in &recs[0].pairs {
        let c = covariation_regression(&recs, i, j)?;
        let (s, se) = c
            .ratio
            .map(|e| (num(e.value), num(e.stderr)))
            .unwrap_or_default();
        t.row([
            i.to_string(),
            j.to_string(),
            s,
            se,
            num(c.realized.value),
            num(c.realized.stderr),
            num(c.predicted),
        ])?;
    }
    t.finish()?;
    let blew_up = recs.iter().any(|r| r.status == RunStatus::BlowUp);
    Ok((
        json!({ "status": status_counts(&recs), "regressions": reports }),
        blew_up,
    ))
}

pub fn total_mass(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Summary, CliError> {
    let alpha_bar: f64 = cfg.physics.insertions.iter().map(|i| i.alpha).sum();
    let horizon = cfg.run.horizon;
    let sde = MassSdeConfig::phi(cfg.physics.sigma, cfg.physics.lambda, cfg.run.a0)?
        .with_insertions(alpha_bar, cfg.physics.chi)?
        .with_time(cfg.scheme.dt, horizon)?;
    let record: Vec<f64> = (1..=20).map(|k| horizon * k as f64 / 20.0).collect();
    let opts = SimOptions {
        record_times: record.clone(),
        ..SimOptions::default()
    };
    let ens = simulate_mass_with(&sde, cfg.run.replicas, cfg.run.seed, &opts)?;
    let closed_form = !sde.has_insertions();

    let mut t = out.csv(
        "mass_paths.csv",
        "totalmass-paths",
        &["path", "hit_time", "final_value", "min", "max"],
    )?;
    for (i, p) in ens.paths.iter().enumerate() {
        t.row([
            i.to_string(),
            p.hit_time.map(num).unwrap_or_default(),
            num(p.final_value),
            num(p.min),
            num(p.max),
        ])?;
    }
    t.finish()?;

    let hits: Vec<f64> = ens.paths.iter().filter_map(|p| p.hit_time).collect();
    let n = ens.paths.len() as f64;
    let mut t = out.csv(
        "hitting_cdf.csv",
        "totalmass-hitting",
        &["t", "empirical", "oracle"],
    )?;
    for k in 1..=200 {
        let time = horizon * k as f64 / 200.0;
        let emp = hits.iter().filter(|&&h| h <= time).count() as f64 / n;
        let oracle = if closed_form {
            num(hitting_cdf(&sde, time)?)
        } else {
            String::new()
        };
        t.row([num(time), num(emp), oracle])?;
    }
    t.finish()?;

    let (b, c, _) = sde.coefficients();
    let mut t = out.csv(
        "mass_quantiles.csv",
        "totalmass-quantiles",
        &["t", "mean", "q05", "q50", "q95", "oracle_mean"],
    )?;
    for (k, &time) in record.iter().enumerate() {
        let mut xs = ens.samples_at(k);
        xs.sort_by(f64::total_cmp);
        let q = |p: f64| xs[((xs.len() - 1) as f64 * p).round() as usize];
        // Linear drift: E[A_t] solves m' = b - c m while no path is stopped.
        let oracle = if c == 0.0 {
            sde.a0 + b * time
        } else {
            sde.a0 * (-c * time).exp() + b / c * (1.0 - (-c * time).exp())
        };
        let oracle = if closed_form || sde.delta >= 2.0 {
            num(oracle)
        } else {
            String::new()
        };
        t.row([
            num(time),
            num(mean(&xs)),
            num(q(0.05)),
            num(q(0.5)),
            num(q(0.95)),
            oracle,
        ])?;
    }
    t.finish()?;

    if closed_form {
        let mut t = out.csv(
            "laplace.csv",
            "totalmass-laplace",
            &["u", "t", "empirical", "stderr", "oracle"],
        )?;
        for k in [4, 9, 14, 19] {
            let xs = ens.samples_at(k);
            for u in [0.5, 1.0, 2.0, 4.0] {
                let v: Vec<f64> = xs.iter().map(|a| (-u * a).exp()).collect();
                t.row([
                    num(u),
                    num(record[k]),
                    num(mean(&v)),
                    num(std_error(&v)),
                    num(laplace_oracle(&sde, u, record[k])?),
                ])?;
            }
        }
        t.finish()?;
    }

    let mut t = out.csv(
        "delta.csv",
        "totalmass-delta",
        &["delta", "class", "hit_fraction"],
    )?;
    let class = classify_boundary(&sde);
    t.row([
        num(sde.delta),
        format!("{class:?}"),
        num(ens.hit_fraction()),
    ])?;
    t.finish()?;
    Ok(json!({
        "delta": sde.delta,
        "class": class,
        "hit_fraction": ens.hit_fraction(),
        "coefficients": [b, c, sde.coefficients().2],
    }))
}

pub fn verify_ibp(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Summary, CliError> {
    let g = cfg.geometry()?;
    let (fs, dirs) = reference_catalog(&g)?;
    let setup = IbpSetup {
        geometry: g.clone(),
        sigma: cfg.physics.sigma,
        lambda: cfg.physics.lambda,
        mollifier: cfg.mollifier(&g),
        n_samples: cfg.run.replicas,
        seed: cfg.run.seed,
        quad_tol: 1e-10,
    };
    let reports = ibp_catalog(&setup, &fs, &dirs)?;
    let mut t = out.csv(
        "ibp.csv",
        "ibp",
        &[
            "id",
            "functional",
            "direction",
            "sigma",
            "lambda",
            "lhs",
            "lhs_stderr",
            "rhs",
            "rhs_stderr",
            "stderr",
            "z",
            "n",
            "seed",
        ],
    )?;
    for (i, r) in reports.iter().enumerate() {
        t.row([
            i.to_string(),
            r.functional.clone(),
            r.direction.clone(),
            num(r.sigma),
            num(r.lambda),
            num(r.lhs.value),
            num(r.lhs.stderr),
            num(r.rhs.value),
            num(r.rhs.stderr),
            num(r.diff_stderr),
            num(r.z),
            r.n.to_string(),
            r.seed.to_string(),
        ])?;
    }
    t.finish()?;
    let max_z = reports.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
    Ok(json!({ "reports": reports.len(), "max_abs_z": max_z }))
}

pub fn expand(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Summary, CliError> {
    let g = cfg.geometry()?;
    let phi = ScalarField::mode(g.clone(), 1, 0, 0.0).scaled(cfg.run.amplitude);
    let mut ecfg = ExpansionConfig::new(
        cfg.physics.lambda,
        cfg.scheme.dt,
        cfg.run.horizon,
        cfg.scheme.eps,
    );
    ecfg.mollifier = cfg.mollifier(&g);
    ecfg.cbar = cfg.scheme.cbar;
    let phi0 = solve_phi0(&phi, &ecfg)?;
    let h = cfg.run.horizon / ecfg.steps() as f64;
    let mut t = out.csv("phi0_energy.csv", "expansion-energy", &["t", "energy"])?;
    for (k, f) in phi0.iter().enumerate() {
        t.row([num(k as f64 * h), num(grad_inner(f, f)?)])?;
    }
    t.finish()?;
    let study = coupled_error_study(&phi, &ecfg, &cfg.run.sigmas, cfg.run.replicas, cfg.run.seed)?;
    let mut t = out.csv("expansion.csv", "expansion", &["sigma", "error", "stderr"])?;
    for (s, e) in study.sigmas.iter().zip(&study.errors) {
        t.row([num(*s), num(e.value), num(e.stderr)])?;
    }
    t.finish()?;
    Ok(json!({ "slope": study.slope }))
}
