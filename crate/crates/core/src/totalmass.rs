//! One-dimensional dynamics of the total area `A_t(1)`.
//!
//! In the conformal-factor convention and without insertions the total
//! area is the Feller diffusion `dA = 2 sigma sqrt(A) dB - 2 lambda A dt`.
//! Insertions of total weight `alpha_bar` add the constant drift
//! `gamma (alpha_bar - Q chi)` in Liouville units, which makes `A` a
//! time-changed squared Bessel process of dimension
//! `delta = (2/gamma)(alpha_bar - Q chi)` (plus linear mean reversion).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::conventions::Convention;
use crate::ensemble::map_replicas;
use crate::error::{invalid, Error, Result};
use crate::gff::check_sigma;
use crate::rng::{Domain, StreamKey};
use crate::stats::neumaier_sum;

/// Parameters of the total-area diffusion.
///
/// Both parameter pairs are always filled in; `convention` decides in which
/// units (and time scale) simulations run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassSdeConfig {
    pub convention: Convention,
    pub sigma: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub mu: f64,
    pub alpha_bar: f64,
    pub chi: f64,
    pub a0: f64,
    pub dt: f64,
    pub horizon: f64,
    pub delta: f64,
}

impl MassSdeConfig {
    /// Conformal-factor convention, no insertions, `chi = 0`.
    pub fn phi(sigma: f64, lambda: f64, a0: f64) -> Result<Self> {
        check_sigma(sigma)?;
        if !(lambda >= 0.0) {
            return Err(invalid("lambda", "lambda < 0"));
        }
        let gamma = sigma / PI.sqrt();
        let mu = if lambda == 0.0 {
            0.0
        } else {
            lambda / (PI * gamma * gamma)
        };
        Self {
            convention: Convention::Phi,
            sigma,
            lambda,
            gamma,
            mu,
            alpha_bar: 0.0,
            chi: 0.0,
            a0,
            dt: 1e-3,
            horizon: 1.0,
            delta: 0.0,
        }
        .validated()
    }

    /// Liouville convention, no insertions, `chi = 0`.
    pub fn x(gamma: f64, mu: f64, a0: f64) -> Result<Self> {
        if !(gamma >= 0.0) {
            return Err(invalid("gamma", "gamma < 0"));
        }
        if !(mu >= 0.0) {
            return Err(invalid("mu", "mu < 0"));
        }
        let mut c = Self::phi(PI.sqrt() * gamma, PI * mu * gamma * gamma, a0)?;
        c.convention = Convention::X;
        c.gamma = gamma;
        c.mu = mu;
        Ok(c)
    }

    pub fn with_insertions(mut self, alpha_bar: f64, chi: f64) -> Result<Self> {
        self.alpha_bar = alpha_bar;
        self.chi = chi;
        self.validated()
    }

    pub fn with_time(mut self, dt: f64, horizon: f64) -> Result<Self> {
        self.dt = dt;
        self.horizon = horizon;
        self.validated()
    }

    fn validated(mut self) -> Result<Self> {
        if !(self.a0 > 0.0) {
            return Err(invalid("a0", "A0 <= 0"));
        }
        if !(self.dt > 0.0) || !(self.horizon > 0.0) {
            return Err(invalid("dt", "time step and horizon must be positive"));
        }
        if self.gamma == 0.0 && (self.alpha_bar != 0.0 || self.chi != 0.0) {
            return Err(invalid("gamma", "insertions or curvature need gamma > 0"));
        }
        self.delta = bessel_dimension(self.gamma, self.alpha_bar, self.chi);
        Ok(self)
    }

    /// Coefficients `(b, c, s)` of `dA = (b - c A) dt + s sqrt(A) dW` in the
    /// configured convention.
    pub fn coefficients(&self) -> (f64, f64, f64) {
        // gamma * (alpha_bar - Q chi), written so that gamma = 0 is finite.
        let insert = self.gamma * self.alpha_bar - (2.0 + self.gamma * self.gamma / 2.0) * self.chi;
        match self.convention {
            Convention::Phi => (2.0 * PI * insert, 2.0 * self.lambda, 2.0 * self.sigma),
            Convention::X => (
                insert,
                self.mu * self.gamma * self.gamma,
                self.gamma * 2f64.sqrt(),
            ),
        }
    }

    pub fn has_insertions(&self) -> bool {
        self.alpha_bar != 0.0 || self.chi != 0.0
    }
}

/// `delta = (2/gamma)(alpha_bar - Q chi)`.
pub fn bessel_dimension(gamma: f64, alpha_bar: f64, chi: f64) -> f64 {
    if alpha_bar == 0.0 && chi == 0.0 {
        return 0.0;
    }
    2.0 * alpha_bar / gamma - (4.0 / (gamma * gamma) + 1.0) * chi
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryClass {
    NeverHitsZero,
    HitsZeroContinuable,
    Absorbing,
}

pub fn classify_boundary(cfg: &MassSdeConfig) -> BoundaryClass {
    classify_delta(cfg.delta)
}

pub fn classify_delta(delta: f64) -> BoundaryClass {
    if delta >= 2.0 {
        BoundaryClass::NeverHitsZero
    } else if delta > 0.0 {
        BoundaryClass::HitsZeroContinuable
    } else {
        BoundaryClass::Absorbing
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeibergReport {
    pub q: f64,
    pub alpha_bar: f64,
    /// Indices with `alpha_i >= Q`.
    pub local_violations: Vec<usize>,
    pub local_ok: bool,
    /// `alpha_bar - Q chi > 0`.
    pub global_ok: bool,
    pub delta: f64,
    pub class: BoundaryClass,
}

pub fn seiberg_check(alphas: &[f64], gamma: f64, chi: f64) -> Result<SeibergReport> {
    if !(gamma > 0.0) {
        return Err(invalid("gamma", "gamma <= 0"));
    }
    let q = 2.0 / gamma + gamma / 2.0;
    let alpha_bar = neumaier_sum(alphas.iter().copied());
    let local_violations: Vec<usize> = alphas
        .iter()
        .enumerate()
        .filter(|(_, &a)| a >= q)
        .map(|(i, _)| i)
        .collect();
    let delta = bessel_dimension(gamma, alpha_bar, chi);
    Ok(SeibergReport {
        q,
        alpha_bar,
        local_ok: local_violations.is_empty(),
        local_violations,
        global_ok: alpha_bar - q * chi > 0.0,
        delta,
        class: classify_delta(delta),
    })
}

/// `E[exp(-u A_t)]` for the insertion-free diffusion, from the Riccati
/// equation `v' = -c v - (s^2/2) v^2`, `v(0) = u`.
pub fn laplace_oracle(cfg: &MassSdeConfig, u: f64, t: f64) -> Result<f64> {
    if cfg.has_insertions() {
        return Err(Error::Unsupported(
            "no closed-form Laplace transform with insertions".into(),
        ));
    }
    if !(u >= 0.0) || !(t >= 0.0) {
        return Err(invalid("u", "u and t must be nonnegative"));
    }
    Ok((-cfg.a0 * laplace_exponent(cfg, u, t)).exp())
}

fn laplace_exponent(cfg: &MassSdeConfig, u: f64, t: f64) -> f64 {
    let (_, c, s) = cfg.coefficients();
    let k = 0.5 * s * s;
    if c == 0.0 {
        u / (1.0 + k * u * t)
    } else {
        let e = (-c * t).exp();
        u * e / (1.0 + k * u / c * (1.0 - e))
    }
}

/// `P(T_0 <= t)`, the `u -> infinity` limit of the Laplace transform.
pub fn hitting_cdf(cfg: &MassSdeConfig, t: f64) -> Result<f64> {
    if cfg.has_insertions() {
        return Err(Error::Unsupported(
            "no closed-form hitting law with insertions".into(),
        ));
    }
    if t <= 0.0 {
        return Ok(0.0);
    }
    let (_, c, s) = cfg.coefficients();
    let k = 0.5 * s * s;
    let v = if c == 0.0 {
        1.0 / (k * t)
    } else {
        c / (k * ((c * t).exp() - 1.0))
    };
    Ok((-cfg.a0 * v).exp())
}

/// Step-size control of the Euler scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Times at which every path is sampled (sorted, within the horizon).
    pub record_times: Vec<f64>,
    /// Near zero the step is `min(dt, A / refine)`.
    pub refine: f64,
    /// Lower bound on the refined step.
    pub dt_min: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            record_times: Vec::new(),
            refine: 100.0,
            dt_min: 1e-11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MassPath {
    pub hit_time: Option<f64>,
    pub final_value: f64,
    pub min: f64,
    pub max: f64,
    /// Values at the requested record times.
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PathEnsemble {
    pub config: MassSdeConfig,
    pub seed: u64,
    pub record_times: Vec<f64>,
    pub paths: Vec<MassPath>,
}

impl PathEnsemble {
    pub fn final_values(&self) -> Vec<f64> {
        self.paths.iter().map(|p| p.final_value).collect()
    }

    pub fn hit_times(&self) -> Vec<Option<f64>> {
        self.paths.iter().map(|p| p.hit_time).collect()
    }

    pub fn hit_fraction(&self) -> f64 {
        self.paths.iter().filter(|p| p.hit_time.is_some()).count() as f64 / self.paths.len() as f64
    }

    /// Values at record time `k` across paths.
    pub fn samples_at(&self, k: usize) -> Vec<f64> {
        self.paths.iter().map(|p| p.samples[k]).collect()
    }
}

struct Coeffs {
    b: f64,
    c: f64,
    s: f64,
}

/// Full-truncation Euler with a shared Gaussian increment for every entry
/// of `coeffs` (one entry for plain runs, two for coupled runs).
fn run_coupled_path(
    coeffs: &[Coeffs],
    a0: &[f64],
    dt: f64,
    horizon: f64,
    opts: &SimOptions,
    key: StreamKey,
) -> Vec<MassPath> {
    use rand::Rng;
    use rand_distr::StandardNormal;

    let k = coeffs.len();
    let mut rng = key.rng();
    let mut x: Vec<f64> = a0.to_vec();
    let mut alive = vec![true; k];
    let mut paths: Vec<MassPath> = a0
        .iter()
        .map(|&v| MassPath {
            hit_time: None,
            final_value: v,
            min: v,
            max: v,
            samples: Vec::with_capacity(opts.record_times.len()),
        })
        .collect();
    let mut t = 0.0;
    let mut next_record = 0;
    while t < horizon && alive.iter().any(|&a| a) {
        let mut h = dt;
        for i in 0..k {
            if alive[i] {
                h = h.min((x[i] / opts.refine).max(opts.dt_min));
            }
        }
        let stop = opts
            .record_times
            .get(next_record)
            .copied()
            .unwrap_or(horizon)
            .min(horizon);
        let landing = t + h >= stop;
        if landing {
            h = stop - t;
        }
        let z: f64 = rng.sample(StandardNormal);
        let sqh = h.sqrt();
        t = if landing { stop } else { t + h };
        for i in 0..k {
            if !alive[i] {
                continue;
            }
            let c = &coeffs[i];
            let xp = x[i].max(0.0);
            let next = x[i] + (c.b - c.c * xp) * h + c.s * (xp).sqrt() * sqh * z;
            if next <= 0.0 {
                x[i] = 0.0;
                alive[i] = false;
                paths[i].hit_time = Some(t);
            } else {
                x[i] = next;
            }
            paths[i].min = paths[i].min.min(x[i]);
            paths[i].max = paths[i].max.max(x[i]);
        }
        while next_record < opts.record_times.len() && opts.record_times[next_record] <= t {
            for i in 0..k {
                paths[i].samples.push(x[i]);
            }
            next_record += 1;
        }
    }
    // Record times after every path stopped see the stopped value.
    while next_record < opts.record_times.len() {
        for i in 0..k {
            paths[i].samples.push(x[i]);
        }
        next_record += 1;
    }
    for i in 0..k {
        paths[i].final_value = x[i];
    }
    paths
}

fn check_record_times(times: &[f64], horizon: f64) -> Result<()> {
    if times.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::TimeGrid("record times must increase".into()));
    }
    if times.iter().any(|&t| !(t > 0.0) || t > horizon) {
        return Err(Error::TimeGrid(
            "record times must lie in (0, horizon]".into(),
        ));
    }
    Ok(())
}

pub fn simulate_mass(cfg: &MassSdeConfig, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    simulate_mass_with(cfg, n_paths, seed, &SimOptions::default())
}

pub fn simulate_mass_with(
    cfg: &MassSdeConfig,
    n_paths: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<PathEnsemble> {
    check_record_times(&opts.record_times, cfg.horizon)?;
    let (b, c, s) = cfg.coefficients();
    let coeffs = [Coeffs { b, c, s }];
    let paths = map_replicas(n_paths, |i| {
        let key = StreamKey::new(seed, Domain::MassPath, i as u64, 0);
        run_coupled_path(&coeffs, &[cfg.a0], cfg.dt, cfg.horizon, opts, key)
            .pop()
            .expect("one path")
    });
    Ok(PathEnsemble {
        config: *cfg,
        seed,
        record_times: opts.record_times.clone(),
        paths,
    })
}

/// Two configurations driven by the same Brownian motion on a common
/// (adaptive) time grid.
pub fn simulate_coupled(
    a: &MassSdeConfig,
    b: &MassSdeConfig,
    n_paths: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<(PathEnsemble, PathEnsemble)> {
    if a.convention != b.convention || a.horizon != b.horizon || a.dt != b.dt {
        return Err(Error::TimeGrid(
            "coupled runs need equal convention, dt and horizon".into(),
        ));
    }
    check_record_times(&opts.record_times, a.horizon)?;
    let ca = a.coefficients();
    let cb = b.coefficients();
    let coeffs = [
        Coeffs {
            b: ca.0,
            c: ca.1,
            s: ca.2,
        },
        Coeffs {
            b: cb.0,
            c: cb.1,
            s: cb.2,
        },
    ];
    let pairs = map_replicas(n_paths, |i| {
        let key = StreamKey::new(seed, Domain::MassPath, i as u64, 0);
        run_coupled_path(&coeffs, &[a.a0, b.a0], a.dt, a.horizon, opts, key)
    });
    let (pa, pb): (Vec<_>, Vec<_>) = pairs
        .into_iter()
        .map(|mut v| {
            let second = v.pop().expect("two paths");
            (v.pop().expect("two paths"), second)
        })
        .unzip();
    let wrap = |config: &MassSdeConfig, paths| PathEnsemble {
        config: *config,
        seed,
        record_times: opts.record_times.clone(),
        paths,
    };
    Ok((wrap(a, pa), wrap(b, pb)))
}
