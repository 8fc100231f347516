//! Small-noise expansion `phi = phi_0 + sigma phi_1 + O(sigma^2)`.
//!
//! `phi_0` is the deterministic flow `d phi_0 = c(phi_0) Delta phi_0 - lambda`
//! and `phi_1` the linearization
//! `d phi_1 = c(phi_0) Delta phi_1 - 2 c(phi_0) (K phi_1) Delta phi_0 + d(phi_0) xi`,
//! with `c = e^{-2 K phi}`, `d = e^{-K phi}` and `K` the mollifier. Both
//! use the IMEX discretization of [`crate::srf`] with a fixed implicit
//! coefficient, so each `phi_1` step is the exact derivative in `sigma` of
//! the corresponding SRF step under the same noise.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ensemble::map_replicas;
use crate::error::{invalid, Error, Result};
use crate::gff::{mollify, Mollifier};
use crate::lattice::{ScalarField, TorusGeometry};
use crate::rng::{fill_normals, Domain, StreamKey};
use crate::srf::{ImplicitCoefficient, Renormalization, Simulator, SrfConfig, Stepper};
use crate::stats::{ls_slope, Estimate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpansionConfig {
    pub lambda: f64,
    pub dt: f64,
    pub horizon: f64,
    /// 0 computes `phi_0` only.
    pub order: u8,
    /// Mollifier used in the coefficients.
    pub mollifier: Mollifier,
    /// Implicit coefficient; `None` takes `max c(phi_init)`.
    pub cbar: Option<f64>,
    pub guard: f64,
}

impl ExpansionConfig {
    pub fn new(lambda: f64, dt: f64, horizon: f64, eps: f64) -> Self {
        Self {
            lambda,
            dt,
            horizon,
            order: 1,
            mollifier: Mollifier::heat(eps),
            cbar: None,
            guard: 50.0,
        }
    }

    pub fn validate(&self, g: &TorusGeometry) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(invalid("lambda", "lambda < 0"));
        }
        if !(self.dt > 0.0) {
            return Err(invalid("dt", "dt <= 0"));
        }
        if !(self.horizon > 0.0) {
            return Err(invalid("horizon", "T <= 0"));
        }
        if self.order > 1 {
            return Err(Error::Unsupported(format!(
                "expansion order {} (only 0 and 1)",
                self.order
            )));
        }
        if let Some(c) = self.cbar {
            if !(c > 0.0) {
                return Err(invalid("cbar", "cbar <= 0"));
            }
        }
        self.mollifier.validate(g)
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round().max(1.0) as usize
    }

    /// The implicit coefficient actually used from `phi_init`.
    pub fn resolve_cbar(&self, phi_init: &ScalarField) -> Result<f64> {
        match self.cbar {
            Some(c) => Ok(c),
            None => Ok(coefficients(phi_init, &self.mollifier)?
                .0
                .into_iter()
                .fold(0.0, f64::max)),
        }
    }

    /// SRF configuration whose steps this expansion differentiates.
    pub fn srf_config(&self, sigma: f64, cbar: f64) -> SrfConfig {
        SrfConfig {
            sigma,
            lambda: self.lambda,
            dt: self.horizon / self.steps() as f64,
            mollifier: self.mollifier,
            renormalization: Renormalization::default(),
            stepper: Stepper::Imex {
                implicit: ImplicitCoefficient::Fixed { value: cbar },
                refresh_every: Some(1),
            },
            insertions: Vec::new(),
            horizon: self.horizon,
            record_interval: self.horizon,
            a_min: None,
            guard: self.guard,
            observables: Vec::new(),
        }
    }
}

/// `(c, K phi)` on the grid.
fn coefficients(phi: &ScalarField, m: &Mollifier) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = mollify(phi, m)?.values();
    Ok((k.iter().map(|v| (-2.0 * v).exp()).collect(), k))
}

/// Deterministic trajectory `phi_0(t_k)`, `t_k = k dt`, including `t = 0`.
pub fn solve_phi0(phi_init: &ScalarField, cfg: &ExpansionConfig) -> Result<Vec<ScalarField>> {
    let g = phi_init.geometry().clone();
    cfg.validate(&g)?;
    let cbar = cfg.resolve_cbar(phi_init)?;
    let h = cfg.horizon / cfg.steps() as f64;
    let mult = implicit_multiplier(&g, h, cbar);
    let mut traj = Vec::with_capacity(cfg.steps() + 1);
    traj.push(phi_init.clone());
    for k in 0..cfg.steps() {
        let phi = &traj[k];
        let (c, _) = coefficients(phi, &cfg.mollifier)?;
        let lap = g.laplacian_values(phi.zero_mean_values());
        let rhs: Vec<f64> = (0..g.len())
            .map(|i| phi.value(i) + h * ((c[i] - cbar) * lap[i] - cfg.lambda))
            .collect();
        let next = ScalarField::from_values(g.clone(), g.apply_multiplier(&rhs, &mult));
        guard(&next, cfg.guard, (k + 1) as f64 * h)?;
        traj.push(next);
    }
    Ok(traj)
}

fn implicit_multiplier(g: &TorusGeometry, h: f64, cbar: f64) -> Vec<f64> {
    g.eigenvalues()
        .iter()
        .map(|l| 1.0 / (1.0 + h * cbar * l))
        .collect()
}

fn guard(f: &ScalarField, bound: f64, t: f64) -> Result<()> {
    let m = f.max_abs();
    if !(m <= bound) {
        return Err(Error::BlowUp {
            t,
            reason: format!("|phi| = {m:.3e} exceeds guard {bound}"),
        });
    }
    Ok(())
}

/// Source of the unit cell noise `eta` driving `phi_1`.
#[derive(Debug, Clone, Copy)]
pub enum Forcing {
    /// The SRF noise stream of `(seed, replica)`.
    Stream {
        seed: u64,
        replica: u64,
    },
    None,
}

/// `phi_1` along a `phi_0` trajectory, from `phi1_init`.
pub fn solve_phi1(
    phi0: &[ScalarField],
    phi1_init: &ScalarField,
    cfg: &ExpansionConfig,
    forcing: Forcing,
) -> Result<Vec<ScalarField>> {
    let steps = cfg.steps();
    if phi0.len() != steps + 1 {
        return Err(Error::TimeGrid(format!(
            "phi_0 has {} points, expected {}",
            phi0.len(),
            steps + 1
        )));
    }
    let g = phi0[0].geometry().clone();
    if **phi1_init.geometry() != *g {
        return Err(Error::GeometryMismatch);
    }
    cfg.validate(&g)?;
    let cbar = cfg.resolve_cbar(&phi0[0])?;
    let h = cfg.horizon / steps as f64;
    let mult = implicit_multiplier(&g, h, cbar);
    let scale = (h / g.cell_area()).sqrt();
    let mut eta = vec![0.0; g.len()];
    let mut traj = Vec::with_capacity(steps + 1);
    traj.push(phi1_init.clone());
    for k in 0..steps {
        let p0 = &phi0[k];
        let p1 = &traj[k];
        let (c, kp0) = coefficients(p0, &cfg.mollifier)?;
        let kp1 = mollify(p1, &cfg.mollifier)?.values();
        let lap0 = g.laplacian_values(p0.zero_mean_values());
        let lap1 = g.laplacian_values(p1.zero_mean_values());
        match forcing {
            Forcing::Stream { seed, replica } => fill_normals(
                &mut StreamKey::new(seed, Domain::SrfNoise, replica, k as u64).rng(),
                &mut eta,
            ),
            Forcing::None => eta.iter_mut().for_each(|e| *e = 0.0),
        }
        let rhs: Vec<f64> = (0..g.len())
            .map(|i| {
                p1.value(i)
                    + h * ((c[i] - cbar) * lap1[i] - 2.0 * c[i] * kp1[i] * lap0[i])
                    + scale * (-kp0[i]).exp() * eta[i]
            })
            .collect();
        traj.push(ScalarField::from_values(
            g.clone(),
            g.apply_multiplier(&rhs, &mult),
        ));
    }
    Ok(traj)
}

/// Horizon after which `|grad phi_0|` has dropped by `factor` for
/// `lambda = 0`: the energy obeys `E' <= -2 c_min lambda_1 E` with
/// `c_min = exp(-2 max phi_init)` (maximum principle) and `lambda_1` the
/// smallest nonzero eigenvalue of `-Delta`.
pub fn decay_horizon(phi_init: &ScalarField, factor: f64) -> f64 {
    let g = phi_init.geometry();
    let lambda1 = g
        .eigenvalues()
        .iter()
        .copied()
        .filter(|l| *l > 0.0)
        .fold(f64::INFINITY, f64::min);
    let max_phi = phi_init
        .values()
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    let c_min = (-2.0 * max_phi).exp();
    factor.recip().ln() / (c_min * lambda1)
}

#[derive(Debug, Clone, Serialize)]
pub struct ExpansionStudy {
    pub sigmas: Vec<f64>,
    /// `E |phi_sigma(T) - phi_0(T) - sigma phi_1(T)|^2` (area-weighted L2).
    pub errors: Vec<Estimate>,
    /// Least-squares slope of `log error` on `log sigma`.
    pub slope: f64,
    pub replicas: usize,
    pub seed: u64,
}

/// Coupled-noise refinement study: for each replica the SRF runs at every
/// `sigma` and `phi_1` share one noise stream.
pub fn coupled_error_study(
    phi_init: &ScalarField,
    cfg: &ExpansionConfig,
    sigmas: &[f64],
    replicas: usize,
    seed: u64,
) -> Result<ExpansionStudy> {
    if sigmas.len() < 2 || replicas < 2 {
        return Err(Error::InsufficientData(
            "need two noise levels and two replicas".into(),
        ));
    }
    let g: Arc<TorusGeometry> = phi_init.geometry().clone();
    let phi0 = solve_phi0(phi_init, cfg)?;
    let cbar = cfg.resolve_cbar(phi_init)?;
    let sims: Vec<Simulator> = sigmas
        .iter()
        .map(|&s| Simulator::new(cfg.srf_config(s, cbar), g.clone()))
        .collect::<Result<_>>()?;
    let zero = ScalarField::zero(g.clone());
    let h = cfg.horizon / cfg.steps() as f64;
    let a = g.cell_area();
    let end0 = phi0.last().expect("nonempty").values();
    let per: Vec<Result<Vec<f64>>> = map_replicas(replicas, |r| {
        let phi1 = solve_phi1(
            &phi0,
            &zero,
            cfg,
            Forcing::Stream {
                seed,
                replica: r as u64,
            },
        )?;
        let end1 = phi1.last().expect("nonempty").values();
        let mut errs = Vec::with_capacity(sigmas.len());
        for (sim, &sigma) in sims.iter().zip(sigmas) {
            let mut s = sim.init_state(phi_init)?;
            for k in 0..cfg.steps() {
                let eta = sim.noise(seed, r as u64, k as u64);
                sim.step_with_noise(&mut s, h, &eta)?;
            }
            let err: f64 = (0..g.len())
                .map(|i| {
                    let e = s.phi.value(i) - end0[i] - sigma * end1[i];
                    a * e * e
                })
                .sum();
            errs.push(err);
        }
        Ok(errs)
    });
    let per: Vec<Vec<f64>> = per.into_iter().collect::<Result<_>>()?;
    let errors: Vec<Estimate> = (0..sigmas.len())
        .map(|j| Estimate::of_mean(&per.iter().map(|e| e[j]).collect::<Vec<_>>()))
        .collect();
    let lx: Vec<f64> = sigmas.iter().map(|s| s.ln()).collect();
    let ly: Vec<f64> = errors.iter().map(|e| e.value.ln()).collect();
    Ok(ExpansionStudy {
        sigmas: sigmas.to_vec(),
        slope: ls_slope(&lx, &ly),
        errors,
        replicas,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry() -> Arc<TorusGeometry> {
        TorusGeometry::square(16).unwrap()
    }

    #[test]
    fn constant_data_is_stationary_or_drifts() {
        let g = geometry();
        let phi = ScalarField::constant(g.clone(), 0.4);
        let cfg = ExpansionConfig::new(0.0, 1e-3, 0.05, 0.125);
        let traj = solve_phi0(&phi, &cfg).unwrap();
        for f in &traj {
            assert!(f.values().iter().all(|v| (v - 0.4).abs() < 1e-14));
        }
        let cfg = ExpansionConfig::new(0.7, 1e-3, 0.05, 0.125);
        let traj = solve_phi0(&phi, &cfg).unwrap();
        let end = traj.last().unwrap();
        let expected = 0.4 - 0.7 * 0.05;
        assert!(end.values().iter().all(|v| (v - expected).abs() < 1e-13));
    }

    #[test]
    fn phi1_without_noise_from_zero_vanishes() {
        let g = geometry();
        let phi = ScalarField::mode(g.clone(), 1, 0, 0.0).scaled(0.3);
        let cfg = ExpansionConfig::new(0.5, 1e-3, 0.02, 0.125);
        let p0 = solve_phi0(&phi, &cfg).unwrap();
        let p1 = solve_phi1(&p0, &ScalarField::zero(g), &cfg, Forcing::None).unwrap();
        assert!(p1.iter().all(|f| f.max_abs() == 0.0));
    }

    #[test]
    fn phi1_is_additive() {
        let g = geometry();
        let phi = ScalarField::mode(g.clone(), 1, 1, 0.2).scaled(0.3);
        let cfg = ExpansionConfig::new(0.5, 1e-3, 0.02, 0.125);
        let p0 = solve_phi0(&phi, &cfg).unwrap();
        let init = ScalarField::mode(g.clone(), 2, 0, 0.0);
        let forced = Forcing::Stream {
            seed: 4,
            replica: 0,
        };
        let both = solve_phi1(&p0, &init, &cfg, forced).unwrap();
        let data = solve_phi1(&p0, &init, &cfg, Forcing::None).unwrap();
        let noise = solve_phi1(&p0, &ScalarField::zero(g), &cfg, forced).unwrap();
        let (b, d, n) = (
            both.last().unwrap().values(),
            data.last().unwrap().values(),
            noise.last().unwrap().values(),
        );
        for i in 0..b.len() {
            assert!((b[i] - d[i] - n[i]).abs() < 1e-12 * (1.0 + b[i].abs()));
        }
    }

    #[test]
    fn time_grid_mismatch() {
        let g = geometry();
        let phi = ScalarField::zero(g.clone());
        let cfg = ExpansionConfig::new(0.0, 1e-3, 0.01, 0.125);
        let p0 = solve_phi0(&phi, &cfg).unwrap();
        let short = ExpansionConfig {
            horizon: 0.02,
            ..cfg
        };
        assert!(matches!(
            solve_phi1(&p0, &phi, &short, Forcing::None),
            Err(Error::TimeGrid(_))
        ));
    }

    #[test]
    fn order_two_is_unsupported() {
        let g = geometry();
        let cfg = ExpansionConfig {
            order: 2,
            ..ExpansionConfig::new(0.0, 1e-3, 0.01, 0.125)
        };
        assert!(matches!(cfg.validate(&g), Err(Error::Unsupported(_))));
    }

    #[test]
    fn sigma_zero_srf_reproduces_phi0() {
        let g = geometry();
        let phi = ScalarField::mode(g.clone(), 1, 0, 0.0).scaled(0.5);
        let cfg = ExpansionConfig::new(0.3, 1e-3, 0.02, 0.125);
        let p0 = solve_phi0(&phi, &cfg).unwrap();
        let cbar = cfg.resolve_cbar(&phi).unwrap();
        let sim = Simulator::new(cfg.srf_config(0.0, cbar), g).unwrap();
        let mut s = sim.init_state(&phi).unwrap();
        for k in 0..cfg.steps() {
            let eta = sim.noise(0, 0, k as u64);
            sim.step_with_noise(&mut s, cfg.dt, &eta).unwrap();
        }
        let end = p0.last().unwrap().values();
        for (a, b) in s.phi.values().iter().zip(&end) {
            assert!((a - b).abs() < 1e-13);
        }
    }
}
