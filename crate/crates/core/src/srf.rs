//! Time stepping of the stochastic Ricci flow
//! `d phi = e^{-2 phi} Delta phi dt - lambda dt + sigma e^{-phi} xi`
//! on the torus, and recording of the projected observables `A_t(f)`.
//!
//! Two steppers are available:
//!
//! * [`Stepper::Imex`]: frozen-coefficient linear SHE, implicit in
//!   `cbar * Delta` and explicit in the remainder, with coefficients
//!   `c = e^{-2 phi_eps}`, `d = e^{-phi_eps}` captured at refresh times.
//! * [`Stepper::AreaForm`]: steps the cell masses `A_i` instead of `phi`,
//!   with Wick-normalized coefficients at lattice scale. The conditional
//!   mean and variance of each mass increment are exactly
//!   `2 (a Delta phi_i - lambda A_i) h` and `4 sigma^2 A_i h`, so the total
//!   mass is an exact discrete martingale up to the `lambda` drift.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gff::{check_sigma, GffSampler, Mollifier, MollifierScheme};
use crate::gmc::{background_charge, gamma_of_sigma, GmcBuilder, GmcMeasure};
use crate::lattice::{ScalarField, TorusGeometry};
use crate::rng::{fill_normals, Domain, StreamKey};
use crate::stats::neumaier_sum;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Renormalization {
    /// `c = eps^alpha e^{-2 phi_eps}`, `d = eps^beta e^{-phi_eps}`.
    PowerLaw { alpha: f64, beta: f64 },
    /// `c = e^{2 V - 2 phi_eps}`, `d = e^{V - phi_eps}` with
    /// `V = Var(phi_eps)` under the free field.
    Wick,
}

impl Default for Renormalization {
    fn default() -> Self {
        Self::PowerLaw {
            alpha: 0.0,
            beta: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ImplicitCoefficient {
    /// Spatial maximum of the frozen diffusion coefficient.
    SpatialMax,
    Fixed {
        value: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Stepper {
    Imex {
        implicit: ImplicitCoefficient,
        /// Steps between coefficient refreshes; `None` freezes them at the
        /// initial state.
        refresh_every: Option<u64>,
    },
    /// Requires [`Renormalization::Wick`] and the lattice mollifier. The
    /// step is `min(dt, cfl / (max kappa * lambda_max))`.
    AreaForm { cfl: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Insertion {
    pub point: (f64, f64),
    pub alpha: f64,
}

/// Smooth test functions used as observables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ObservableSpec {
    Constant {
        value: f64,
    },
    /// `offset + amplitude * cos(2 pi (a s + b u) + phase)`.
    Mode {
        a: i64,
        b: i64,
        phase: f64,
        offset: f64,
        amplitude: f64,
    },
    /// `height * exp(1 - 1/(1 - (d/r)^2))` inside the disk of radius `r`.
    Bump {
        center: (f64, f64),
        radius: f64,
        height: f64,
    },
}

impl ObservableSpec {
    pub fn materialize(&self, g: &Arc<TorusGeometry>) -> ScalarField {
        match *self {
            ObservableSpec::Constant { value } => ScalarField::constant(g.clone(), value),
            ObservableSpec::Mode {
                a,
                b,
                phase,
                offset,
                amplitude,
            } => {
                let v = g
                    .mode_values(a, b, phase)
                    .into_iter()
                    .map(|x| offset + amplitude * x)
                    .collect();
                ScalarField::from_values(g.clone(), v)
            }
            ObservableSpec::Bump {
                center,
                radius,
                height,
            } => {
                let v = (0..g.len())
                    .map(|i| height * bump(g.distance(g.site(i), center) / radius))
                    .collect();
                ScalarField::from_values(g.clone(), v)
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            ObservableSpec::Constant { value } => format!("const({value})"),
            ObservableSpec::Mode {
                a,
                b,
                phase,
                offset,
                amplitude,
            } => format!("mode({a},{b},{phase},{offset},{amplitude})"),
            ObservableSpec::Bump {
                center,
                radius,
                height,
            } => format!("bump({},{},{radius},{height})", center.0, center.1),
        }
    }
}

/// Standard `C^infinity` bump on `[0, 1)`, equal to 1 at 0.
pub fn bump(r: f64) -> f64 {
    if r.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - r * r)).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrfConfig {
    pub sigma: f64,
    pub lambda: f64,
    pub dt: f64,
    pub mollifier: Mollifier,
    pub renormalization: Renormalization,
    pub stepper: Stepper,
    pub insertions: Vec<Insertion>,
    pub horizon: f64,
    /// Length of a recording window.
    pub record_interval: f64,
    /// Absorption threshold for `A(1)`; `None` means `1e-6 * Im tau`.
    pub a_min: Option<f64>,
    /// Blow-up guard on `|phi|`.
    pub guard: f64,
    pub observables: Vec<ObservableSpec>,
}

/// Minimum number of steps in a recording window.
pub const MIN_WINDOW_STEPS: usize = 20;

impl SrfConfig {
    /// Frozen-coefficient IMEX defaults at scale `eps`.
    pub fn imex(sigma: f64, lambda: f64, dt: f64, eps: f64, horizon: f64) -> Self {
        Self {
            sigma,
            lambda,
            dt,
            mollifier: Mollifier::heat(eps),
            renormalization: Renormalization::default(),
            stepper: Stepper::Imex {
                implicit: ImplicitCoefficient::SpatialMax,
                refresh_every: Some(1),
            },
            insertions: Vec::new(),
            horizon,
            record_interval: horizon,
            a_min: None,
            guard: 50.0,
            observables: Vec::new(),
        }
    }

    /// Area-form stepper at lattice scale.
    pub fn area_form(g: &TorusGeometry, sigma: f64, lambda: f64, horizon: f64) -> Self {
        Self {
            sigma,
            lambda,
            dt: 1e-3,
            mollifier: Mollifier::lattice(g),
            renormalization: Renormalization::Wick,
            stepper: Stepper::AreaForm { cfl: 1.0 },
            insertions: Vec::new(),
            horizon,
            record_interval: horizon,
            a_min: None,
            guard: 50.0,
            observables: Vec::new(),
        }
    }

    pub fn validate(&self, g: &TorusGeometry) -> Result<()> {
        check_sigma(self.sigma)?;
        if !(self.lambda >= 0.0) {
            return Err(invalid("lambda", "lambda < 0"));
        }
        if !(self.dt > 0.0) {
            return Err(invalid("dt", "dt <= 0"));
        }
        if !(self.horizon > 0.0) {
            return Err(invalid("horizon", "T <= 0"));
        }
        if !(self.record_interval > 0.0) || self.record_interval > self.horizon * (1.0 + 1e-12) {
            return Err(invalid("record_interval", "must lie in (0, T]"));
        }
        if !(self.guard > 0.0) {
            return Err(invalid("guard", "guard <= 0"));
        }
        self.mollifier.validate(g)?;
        match self.stepper {
            Stepper::Imex {
                implicit,
                refresh_every,
            } => {
                if let ImplicitCoefficient::Fixed { value } = implicit {
                    if !(value >= 0.0) {
                        return Err(invalid("implicit", "cbar < 0"));
                    }
                }
                if refresh_every == Some(0) {
                    return Err(invalid("refresh_every", "must be >= 1"));
                }
                let per_window = self.record_interval / self.dt;
                if (per_window - per_window.round()).abs() > 1e-6 {
                    return Err(invalid(
                        "record_interval",
                        "must be a multiple of dt for the IMEX stepper",
                    ));
                }
                let per_run = self.horizon / self.record_interval;
                if (per_run - per_run.round()).abs() > 1e-6 {
                    return Err(invalid("horizon", "must be a multiple of record_interval"));
                }
            }
            Stepper::AreaForm { cfl } => {
                if !(cfl > 0.0 && cfl <= 2.0) {
                    return Err(invalid("cfl", "must lie in (0, 2]"));
                }
                if self.renormalization != Renormalization::Wick {
                    return Err(invalid(
                        "renormalization",
                        "the area-form stepper is Wick-normalized",
                    ));
                }
                if self.mollifier.scheme != MollifierScheme::Lattice {
                    return Err(invalid(
                        "mollifier",
                        "the area-form stepper works at lattice scale",
                    ));
                }
            }
        }
        if !self.insertions.is_empty() {
            if self.sigma == 0.0 {
                return Err(invalid("insertions", "need sigma > 0"));
            }
            let q = background_charge(gamma_of_sigma(self.sigma));
            if let Some(bad) = self.insertions.iter().find(|i| i.alpha >= q) {
                return Err(invalid(
                    "insertions",
                    format!("alpha = {} >= Q = {q}", bad.alpha),
                ));
            }
        }
        Ok(())
    }

    pub fn absorption_threshold(&self, g: &TorusGeometry) -> f64 {
        self.a_min.unwrap_or(1e-6 * g.area())
    }
}

/// Static log-singular profile of the insertions and their drift on `A`.
#[derive(Debug, Clone)]
pub struct InsertionDecomposition {
    /// `sum_i alpha_i G(x_i, .)` with `G = 2 pi (-Delta)^{-1}` (zero mean).
    pub h_sing: ScalarField,
    /// Cell hosting each insertion.
    pub cells: Vec<usize>,
    /// Mass injection rate per insertion, `2 pi gamma alpha_i` (conformal
    /// factor time).
    pub rates: Vec<f64>,
}

impl InsertionDecomposition {
    /// `sum_i rate_i f(x_i)`.
    pub fn drift(&self, f: &ScalarField) -> f64 {
        self.cells
            .iter()
            .zip(&self.rates)
            .map(|(&c, r)| r * f.value(c))
            .sum()
    }
}

pub fn insertion_decompose(
    g: &Arc<TorusGeometry>,
    sigma: f64,
    insertions: &[Insertion],
) -> Result<InsertionDecomposition> {
    let gamma = gamma_of_sigma(sigma);
    if !insertions.is_empty() {
        if !(gamma > 0.0) {
            return Err(invalid("insertions", "need sigma > 0"));
        }
        let q = background_charge(gamma);
        if let Some(bad) = insertions.iter().find(|i| i.alpha >= q) {
            return Err(invalid(
                "insertions",
                format!("alpha = {} >= Q = {q}", bad.alpha),
            ));
        }
    }
    let cells: Vec<usize> = insertions.iter().map(|i| g.nearest_site(i.point)).collect();
    let mut delta = vec![0.0; g.len()];
    for (c, ins) in cells.iter().zip(insertions) {
        delta[*c] += ins.alpha / g.cell_area();
    }
    let h_sing = ScalarField::from_values(g.clone(), delta)
        .inverse_laplacian()
        .scaled(2.0 * PI);
    Ok(InsertionDecomposition {
        h_sing,
        cells,
        rates: insertions
            .iter()
            .map(|i| 2.0 * PI * gamma * i.alpha)
            .collect(),
    })
}

/// Evolving state. `masses` is `build_gmc(phi)` at the configured scale as
/// of the last refresh (every step for the area-form stepper).
#[derive(Debug, Clone)]
pub struct SrfState {
    pub t: f64,
    pub steps: u64,
    pub phi: ScalarField,
    pub masses: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
    cbar: f64,
}

impl SrfState {
    /// Frozen diffusion coefficient `c(x)`.
    pub fn diffusion_coefficient(&self) -> &[f64] {
        &self.c
    }

    /// Frozen noise coefficient `d(x)`.
    pub fn noise_coefficient(&self) -> &[f64] {
        &self.d
    }

    pub fn implicit_coefficient(&self) -> f64 {
        self.cbar
    }
}

pub struct Simulator {
    cfg: SrfConfig,
    geometry: Arc<TorusGeometry>,
    builder: GmcBuilder,
    lambda_max: f64,
    insertions: InsertionDecomposition,
}

impl Simulator {
    pub fn new(cfg: SrfConfig, geometry: Arc<TorusGeometry>) -> Result<Self> {
        cfg.validate(&geometry)?;
        let builder = GmcBuilder::new(geometry.clone(), cfg.sigma, cfg.mollifier)?;
        let insertions = insertion_decompose(&geometry, cfg.sigma, &cfg.insertions)?;
        Ok(Self {
            lambda_max: geometry.lambda_max(),
            cfg,
            geometry,
            builder,
            insertions,
        })
    }

    pub fn config(&self) -> &SrfConfig {
        &self.cfg
    }

    pub fn geometry(&self) -> &Arc<TorusGeometry> {
        &self.geometry
    }

    pub fn insertions(&self) -> &InsertionDecomposition {
        &self.insertions
    }

    pub fn init_state(&self, phi: &ScalarField) -> Result<SrfState> {
        if **phi.geometry() != *self.geometry {
            return Err(Error::GeometryMismatch);
        }
        let mut s = SrfState {
            t: 0.0,
            steps: 0,
            phi: phi.clone(),
            masses: Vec::new(),
            c: Vec::new(),
            d: Vec::new(),
            cbar: 0.0,
        };
        self.refresh(&mut s);
        Ok(s)
    }

    pub fn measure(&self, s: &SrfState) -> GmcMeasure {
        GmcMeasure::from_masses(
            self.geometry.clone(),
            s.masses.clone(),
            self.cfg.sigma,
            self.cfg.mollifier,
        )
        .expect("masses are positive")
    }

    /// Recompute `A`, `c`, `d` (and `cbar`) from the current field.
    pub fn refresh(&self, s: &mut SrfState) {
        let smooth = self.builder.smooth_values(s.phi.zero_mean_values());
        let m = s.phi.mean();
        let var = self.builder.variance();
        let (c_scale, d_scale, c_shift) = match self.cfg.renormalization {
            Renormalization::PowerLaw { alpha, beta } => {
                let eps = self.cfg.mollifier.eps;
                (eps.powf(alpha), eps.powf(beta), 0.0)
            }
            Renormalization::Wick => (1.0, 1.0, var),
        };
        let a = self.geometry.cell_area();
        if let Stepper::AreaForm { .. } = self.cfg.stepper {
            // kappa = c = d^2 = a / A_i is read off the masses directly.
            s.masses = smooth
                .iter()
                .map(|v| a * (2.0 * (v + m) - 2.0 * var).exp())
                .collect();
            s.cbar = 0.0;
            return;
        }
        s.c = smooth
            .iter()
            .map(|v| c_scale * (2.0 * c_shift - 2.0 * (v + m)).exp())
            .collect();
        s.d = smooth
            .iter()
            .map(|v| d_scale * (c_shift - (v + m)).exp())
            .collect();
        s.masses = smooth
            .iter()
            .map(|v| a * (2.0 * (v + m) - 2.0 * var).exp())
            .collect();
        s.cbar = match self.cfg.stepper {
            Stepper::Imex {
                implicit: ImplicitCoefficient::Fixed { value },
                ..
            } => value,
            _ => s.c.iter().copied().fold(0.0, f64::max),
        };
    }

    /// Step size the stepper would take from `s`, capped at `h_max`.
    pub fn step_size(&self, s: &SrfState, h_max: f64) -> f64 {
        match self.cfg.stepper {
            Stepper::Imex { .. } => self.cfg.dt.min(h_max),
            Stepper::AreaForm { cfl } => {
                let a = self.geometry.cell_area();
                let min_mass = s.masses.iter().copied().fold(f64::INFINITY, f64::min);
                let kappa_max = a / min_mass;
                self.cfg
                    .dt
                    .min(cfl / (kappa_max * self.lambda_max))
                    .min(h_max)
            }
        }
    }

    /// Noise for step number `s.steps` of replica `replica`.
    pub fn noise(&self, seed: u64, replica: u64, step: u64) -> Vec<f64> {
        let mut eta = vec![0.0; self.geometry.len()];
        fill_normals(
            &mut StreamKey::new(seed, Domain::SrfNoise, replica, step).rng(),
            &mut eta,
        );
        eta
    }

    /// One step of size `h` with cell noise `eta`.
    pub fn step_with_noise(&self, s: &mut SrfState, h: f64, eta: &[f64]) -> Result<()> {
        let lap = self.geometry.laplacian_values(s.phi.zero_mean_values());
        self.step_inner(s, h, eta, &lap)
    }

    fn step_inner(&self, s: &mut SrfState, h: f64, eta: &[f64], lap: &[f64]) -> Result<()> {
        let g = &self.geometry;
        let a = g.cell_area();
        let sigma = self.cfg.sigma;
        let lambda = self.cfg.lambda;
        let t_new = s.t + h;
        let new_values: Vec<f64> = match self.cfg.stepper {
            Stepper::Imex { refresh_every, .. } => {
                let noise_scale = sigma * (h / a).sqrt();
                let rhs: Vec<f64> = (0..g.len())
                    .map(|i| {
                        s.phi.value(i)
                            + h * ((s.c[i] - s.cbar) * lap[i] - lambda)
                            + noise_scale * s.d[i] * eta[i]
                    })
                    .collect();
                let mult: Vec<f64> = g
                    .eigenvalues()
                    .iter()
                    .map(|l| 1.0 / (1.0 + h * s.cbar * l))
                    .collect();
                let out_field =
                    ScalarField::from_values(g.clone(), g.apply_multiplier(&rhs, &mult));
                check_guard(&out_field, self.cfg.guard, t_new)?;
                s.phi = out_field;
                s.steps += 1;
                s.t = t_new;
                if refresh_every.is_some_and(|k| s.steps.is_multiple_of(k)) {
                    self.refresh(s);
                }
                return Ok(());
            }
            Stepper::AreaForm { .. } => {
                let mut inject = vec![0.0; g.len()];
                for (&c, r) in self.insertions.cells.iter().zip(&self.insertions.rates) {
                    inject[c] += r * h;
                }
                let mut out = Vec::with_capacity(g.len());
                for i in 0..g.len() {
                    let mass = s.masses[i];
                    // kappa = e^{2V - 2 phi} = a / A_i and d^2 = kappa.
                    let kappa = a / mass;
                    let r = 1.0 + 2.0 * h * (kappa * lap[i] - lambda);
                    if !(r > 0.0) {
                        return Err(Error::BlowUp {
                            t: t_new,
                            reason: format!("negative mass factor {r:.3e} in cell {i}"),
                        });
                    }
                    let drifted = mass * r + inject[i];
                    let rel =
                        4.0 * sigma * sigma * h * kappa * mass * mass / (a * drifted * drifted);
                    let nu2 = rel.ln_1p();
                    // log(A_new / A); the refresh below exponentiates it back.
                    let log_ratio = (drifted / mass).ln() + nu2.sqrt() * eta[i] - 0.5 * nu2;
                    out.push(s.phi.value(i) + 0.5 * log_ratio);
                }
                out
            }
        };
        let field = ScalarField::from_values(g.clone(), new_values);
        check_guard(&field, self.cfg.guard, t_new)?;
        s.phi = field;
        s.t = t_new;
        s.steps += 1;
        self.refresh(s);
        Ok(())
    }

    /// Run from `phi_init` to the horizon, recording the configured
    /// observables (with `f = 1` always first). Blow-up and absorption stop
    /// the run and are reported in the record's status.
    pub fn run_trajectory(
        &self,
        phi_init: &ScalarField,
        seed: u64,
        replica: u64,
    ) -> Result<TrajectoryRecord> {
        let g = &self.geometry;
        let a = g.cell_area();
        let mut fields = vec![ScalarField::constant(g.clone(), 1.0)];
        let mut names = vec!["1".to_string()];
        for o in &self.cfg.observables {
            fields.push(o.materialize(g));
            names.push(o.label());
        }
        let values_of: Vec<Vec<f64>> = fields.iter().map(|f| f.values()).collect();
        let nobs = fields.len();
        let pairs = pair_list(nobs);
        let pair_values: Vec<Vec<f64>> = pairs
            .iter()
            .map(|&(i, j)| {
                values_of[i]
                    .iter()
                    .zip(&values_of[j])
                    .map(|(x, y)| x * y)
                    .collect()
            })
            .collect();
        let squares: Vec<Vec<f64>> = values_of
            .iter()
            .map(|v| v.iter().map(|x| x * x).collect())
            .collect();
        let ins_drift: Vec<f64> = fields.iter().map(|f| self.insertions.drift(f)).collect();
        let four_s2 = 4.0 * self.cfg.sigma * self.cfg.sigma;
        let lambda = self.cfg.lambda;
        let a_min = self.cfg.absorption_threshold(g);

        let mut state = self.init_state(phi_init)?;
        let mut rec = TrajectoryRecord {
            seed,
            replica,
            sigma: self.cfg.sigma,
            lambda,
            observable_names: names,
            pairs: pairs.clone(),
            times: Vec::new(),
            values: vec![Vec::new(); nobs],
            drift: vec![Vec::new(); nobs],
            windows: Vec::new(),
            events: Vec::new(),
            status: RunStatus::Completed,
        };

        let n_windows = (self.cfg.horizon / self.cfg.record_interval)
            .round()
            .max(1.0) as usize;
        let mut masses = state.masses.clone();
        let mut lap = g.laplacian_values(state.phi.zero_mean_values());
        let observe = |masses: &[f64], lap: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let vals: Vec<f64> = values_of.iter().map(|f| dot(f, masses)).collect();
            let drifts: Vec<f64> = (0..nobs)
                .map(|j| 2.0 * (a * dot(&values_of[j], lap) - lambda * vals[j]) + ins_drift[j])
                .collect();
            (vals, drifts)
        };
        let (mut vals, mut drifts) = observe(&masses, &lap);
        let push_boundary = |rec: &mut TrajectoryRecord, t: f64, vals: &[f64], drifts: &[f64]| {
            rec.times.push(t);
            for j in 0..nobs {
                rec.values[j].push(vals[j]);
                rec.drift[j].push(drifts[j]);
            }
        };
        push_boundary(&mut rec, 0.0, &vals, &drifts);

        'windows: for w in 0..n_windows {
            let t_end = if w + 1 == n_windows {
                self.cfg.horizon
            } else {
                (w + 1) as f64 * self.cfg.record_interval
            };
            let mut win = Window {
                t0: state.t,
                t1: t_end,
                steps: 0,
                start_drift: drifts.clone(),
                drift_integral: vec![0.0; nobs],
                realized_qv: vec![0.0; nobs],
                raw_qv: vec![0.0; nobs],
                qv_integral: vec![0.0; nobs],
                covariation: vec![0.0; pairs.len()],
                cov_integral: vec![0.0; pairs.len()],
            };
            while t_end - state.t > 1e-12 * t_end.max(1.0) {
                let h = self.step_size(&state, t_end - state.t);
                let h = if t_end - state.t - h < 1e-12 * t_end.max(1.0) {
                    t_end - state.t
                } else {
                    h
                };
                let sq_int: Vec<f64> = squares.iter().map(|f| dot(f, &masses)).collect();
                let pair_int: Vec<f64> = pair_values.iter().map(|f| dot(f, &masses)).collect();
                let eta = self.noise(seed, replica, state.steps);
                if let Err(e) = self.step_inner(&mut state, h, &eta, &lap) {
                    let reason = e.to_string();
                    rec.events.push(Event::BlowUp {
                        t: state.t + h,
                        reason: reason.clone(),
                    });
                    rec.status = RunStatus::BlowUp;
                    break 'windows;
                }
                let new_masses = match self.cfg.stepper {
                    Stepper::AreaForm { .. } => state.masses.clone(),
                    Stepper::Imex { .. } => self
                        .builder
                        .masses(state.phi.mean(), state.phi.zero_mean_values()),
                };
                let new_lap = g.laplacian_values(state.phi.zero_mean_values());
                let (new_vals, new_drifts) = observe(&new_masses, &new_lap);
                let dm: Vec<f64> = (0..nobs)
                    .map(|j| new_vals[j] - vals[j] - drifts[j] * h)
                    .collect();
                for j in 0..nobs {
                    win.drift_integral[j] += drifts[j] * h;
                    win.realized_qv[j] += dm[j] * dm[j];
                    let raw = new_vals[j] - vals[j];
                    win.raw_qv[j] += raw * raw;
                    win.qv_integral[j] += four_s2 * sq_int[j] * h;
                }
                for (p, &(i, j)) in pairs.iter().enumerate() {
                    win.covariation[p] += dm[i] * dm[j];
                    win.cov_integral[p] += four_s2 * pair_int[p] * h;
                }
                win.steps += 1;
                masses = new_masses;
                lap = new_lap;
                vals = new_vals;
                drifts = new_drifts;
                if vals[0] < a_min {
                    rec.events.push(Event::Absorbed {
                        t: state.t,
                        mass: vals[0],
                    });
                    rec.status = RunStatus::Absorbed;
                    break 'windows;
                }
            }
            state.t = t_end;
            rec.windows.push(win);
            push_boundary(&mut rec, t_end, &vals, &drifts);
        }
        Ok(rec)
    }
}

fn check_guard(f: &ScalarField, guard: f64, t: f64) -> Result<()> {
    let m = f.max_abs();
    if !(m <= guard) {
        return Err(Error::BlowUp {
            t,
            reason: format!("|phi| = {m:.3e} exceeds guard {guard}"),
        });
    }
    Ok(())
}

/// Plain dot product with four interleaved accumulators; used in the
/// per-step recording path, where compensated sums dominate the cost.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Unordered pairs `i < j`.
pub fn pair_list(n: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            v.push((i, j));
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Event {
    Absorbed { t: f64, mass: f64 },
    BlowUp { t: f64, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Absorbed,
    BlowUp,
}

/// Statistics accumulated over one recording window. Index `j` refers to
/// the record's observables, index `p` to its `pairs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
    /// Drift integrand at the window start.
    pub start_drift: Vec<f64>,
    /// Riemann sum of the drift integrand over the window.
    pub drift_integral: Vec<f64>,
    /// Sum of squared compensated increments `dA(f) - drift * h`.
    pub realized_qv: Vec<f64>,
    /// Sum of squared raw increments.
    pub raw_qv: Vec<f64>,
    /// `4 sigma^2 int A_s(f^2) ds`.
    pub qv_integral: Vec<f64>,
    pub covariation: Vec<f64>,
    /// `4 sigma^2 int A_s(f g) ds`.
    pub cov_integral: Vec<f64>,
}

impl Window {
    /// Realized covariation of observables `i` and `j` (QV when equal).
    pub fn covariation_of(&self, pairs: &[(usize, usize)], i: usize, j: usize) -> (f64, f64) {
        if i == j {
            return (self.realized_qv[i], self.qv_integral[i]);
        }
        let key = (i.min(j), i.max(j));
        let p = pairs.iter().position(|&q| q == key).expect("pair recorded");
        (self.covariation[p], self.cov_integral[p])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub seed: u64,
    pub replica: u64,
    pub sigma: f64,
    pub lambda: f64,
    pub observable_names: Vec<String>,
    pub pairs: Vec<(usize, usize)>,
    /// Window boundaries.
    pub times: Vec<f64>,
    /// `A_t(f_j)` at the boundaries (`j = 0` is `f = 1`).
    pub values: Vec<Vec<f64>>,
    /// `2 (omega_0(f_j Delta phi) - lambda A(f_j))` plus insertion drift,
    /// at the boundaries.
    pub drift: Vec<Vec<f64>>,
    pub windows: Vec<Window>,
    pub events: Vec<Event>,
    pub status: RunStatus,
}

impl TrajectoryRecord {
    pub fn total_mass(&self) -> &[f64] {
        &self.values[0]
    }

    pub fn final_total_mass(&self) -> f64 {
        *self.values[0].last().expect("initial value recorded")
    }
}

/// Free-field initial datum for replica `replica`, shifted so that its
/// chaos measure (at lattice scale) has total mass `total_mass`.
pub fn gff_initial_field(
    g: &Arc<TorusGeometry>,
    sigma: f64,
    total_mass: f64,
    seed: u64,
    replica: u64,
) -> Result<ScalarField> {
    let sampler = GffSampler::new(g.clone(), sigma, seed)?;
    let phi = sampler.sample_with_key(StreamKey::new(seed, Domain::InitialField, replica, 0));
    let b = GmcBuilder::new(g.clone(), sigma, Mollifier::lattice(g))?;
    let m0 = neumaier_sum(b.masses(0.0, phi.zero_mean_values()));
    Ok(phi.with_mean(0.5 * (total_mass / m0).ln()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::grad_inner;

    fn sq(n: usize) -> Arc<TorusGeometry> {
        TorusGeometry::square(n).unwrap()
    }

    #[test]
    fn constant_is_a_fixed_point() {
        let g = sq(16);
        let cfg = SrfConfig::imex(0.0, 0.0, 1e-3, 0.125, 0.02);
        let sim = Simulator::new(cfg, g.clone()).unwrap();
        let phi = ScalarField::constant(g, 0.4);
        let rec = sim.run_trajectory(&phi, 0, 0).unwrap();
        assert_eq!(rec.status, RunStatus::Completed);
        let mut s = sim.init_state(&phi).unwrap();
        for k in 0..20 {
            let eta = sim.noise(0, 0, k);
            sim.step_with_noise(&mut s, 1e-3, &eta).unwrap();
        }
        assert!(s.phi.zero_mean_values().iter().all(|v| v.abs() < 1e-15));
        assert!((s.phi.mean() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn energy_decreases_without_noise() {
        let g = sq(32);
        let cfg = SrfConfig::imex(0.0, 0.0, 1e-3, 2.0 / 32.0, 0.05);
        let sim = Simulator::new(cfg, g.clone()).unwrap();
        let phi = ScalarField::mode(g.clone(), 1, 0, 0.0).scaled(0.5);
        let mut s = sim.init_state(&phi).unwrap();
        let mut e = grad_inner(&s.phi, &s.phi).unwrap();
        let zero = vec![0.0; g.len()];
        for _ in 0..50 {
            sim.step_with_noise(&mut s, 1e-3, &zero).unwrap();
            let e2 = grad_inner(&s.phi, &s.phi).unwrap();
            assert!(e2 < e);
            e = e2;
        }
    }

    #[test]
    fn area_form_requires_wick_and_lattice() {
        let g = sq(16);
        let mut cfg = SrfConfig::area_form(&g, 0.3, 1.0, 0.01);
        assert!(cfg.validate(&g).is_ok());
        cfg.renormalization = Renormalization::default();
        assert!(cfg.validate(&g).is_err());
    }

    #[test]
    fn masses_match_gmc_of_the_field() {
        let g = sq(16);
        let mut cfg = SrfConfig::area_form(&g, 0.4, 1.0, 0.002);
        cfg.record_interval = 0.002;
        let sim = Simulator::new(cfg.clone(), g.clone()).unwrap();
        let phi = gff_initial_field(&g, 0.4, 1.0, 1, 0).unwrap();
        let mut s = sim.init_state(&phi).unwrap();
        for k in 0..10 {
            let h = sim.step_size(&s, 1.0);
            let eta = sim.noise(1, 0, k);
            sim.step_with_noise(&mut s, h, &eta).unwrap();
        }
        let rebuilt = crate::gmc::build_gmc(&s.phi, 0.4, &cfg.mollifier).unwrap();
        for (x, y) in rebuilt.masses().iter().zip(&s.masses) {
            assert!((x - y).abs() < 1e-12 * y);
        }
    }

    #[test]
    fn initial_field_has_requested_mass() {
        let g = sq(16);
        let phi = gff_initial_field(&g, 0.5, 2.0, 3, 7).unwrap();
        let m = crate::gmc::build_gmc(&phi, 0.5, &Mollifier::lattice(&g)).unwrap();
        use crate::lattice::AreaMeasure;
        assert!((m.total_mass() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn insertion_trivial_cases() {
        let g = sq(32);
        let d = insertion_decompose(&g, 1.0, &[]).unwrap();
        assert_eq!(d.h_sing.max_abs(), 0.0);
        assert!(d.cells.is_empty());

        let ins = [Insertion {
            point: (0.25, 0.25),
            alpha: 0.5,
        }];
        let d = insertion_decompose(&g, 1.0, &ins).unwrap();
        let far = ObservableSpec::Bump {
            center: (0.75, 0.75),
            radius: 0.2,
            height: 1.0,
        }
        .materialize(&g);
        assert_eq!(d.drift(&far), 0.0);

        let q = background_charge(gamma_of_sigma(1.0));
        let bad = [Insertion {
            point: (0.0, 0.0),
            alpha: q,
        }];
        assert!(insertion_decompose(&g, 1.0, &bad).is_err());
    }

    #[test]
    fn antipodal_insertions_are_symmetric() {
        let g = sq(32);
        let ins = [
            Insertion {
                point: (0.25, 0.25),
                alpha: 0.7,
            },
            Insertion {
                point: (0.75, 0.75),
                alpha: 0.7,
            },
        ];
        let d = insertion_decompose(&g, 1.0, &ins).unwrap();
        let n = g.n();
        for j in 0..n {
            for l in 0..n {
                let a = d.h_sing.value(j * n + l);
                let b = d.h_sing.value(((j + n / 2) % n) * n + (l + n / 2) % n);
                assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn trajectories_are_deterministic() {
        let g = sq(16);
        let mut cfg = SrfConfig::area_form(&g, 0.3, 1.0, 0.004);
        cfg.record_interval = 0.002;
        cfg.observables = vec![ObservableSpec::Mode {
            a: 1,
            b: 0,
            phase: 0.0,
            offset: 1.0,
            amplitude: 0.5,
        }];
        let sim = Simulator::new(cfg, g.clone()).unwrap();
        let phi = gff_initial_field(&g, 0.3, 1.0, 5, 0).unwrap();
        let a = sim.run_trajectory(&phi, 5, 0).unwrap();
        let b = sim.run_trajectory(&phi, 5, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.times.len(), 3);
        assert!(a.values.iter().all(|s| s.len() == 3));
        assert!(a.windows.iter().all(|w| w.steps >= MIN_WINDOW_STEPS));
    }

    #[test]
    fn blow_up_is_flagged() {
        let g = sq(16);
        let mut cfg = SrfConfig::imex(1.0, 0.0, 1e-3, 0.125, 0.01);
        cfg.guard = 1e-3;
        let sim = Simulator::new(cfg, g.clone()).unwrap();
        let rec = sim
            .run_trajectory(&ScalarField::zero(g.clone()), 0, 0)
            .unwrap();
        assert_eq!(rec.status, RunStatus::BlowUp);
        assert!(matches!(rec.events[0], Event::BlowUp { .. }));
    }
}
