//! Gaussian multiplicative chaos `A = :e^{2 phi}: omega_0` at a fixed
//! regularization scale.
//!
//! Cells carry mass `a * exp(2 phi_eps + 2 m - 2 Var(phi_eps))`, with the
//! variance computed exactly by a mode sum, so every cell has expectation
//! `a * e^{2m}` under the free field.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::gff::{check_sigma, GffSampler, Mollifier, MollifierScheme};
use crate::lattice::{integrate, AreaMeasure, ScalarField, TorusGeometry};
use crate::stats::{bootstrap_ci, correlation, mean, neumaier_sum, std_error};

/// `gamma = sigma / sqrt(pi)`.
pub fn gamma_of_sigma(sigma: f64) -> f64 {
    sigma / PI.sqrt()
}

/// Background charge `Q = 2/gamma + gamma/2`.
pub fn background_charge(gamma: f64) -> f64 {
    2.0 / gamma + gamma / 2.0
}

/// Precomputed data for building measures from many fields at one
/// `(sigma, mollifier)`.
#[derive(Debug, Clone)]
pub struct GmcBuilder {
    geometry: Arc<TorusGeometry>,
    sigma: f64,
    mollifier: Mollifier,
    multipliers: Option<Vec<f64>>,
    variance: f64,
}

impl GmcBuilder {
    pub fn new(geometry: Arc<TorusGeometry>, sigma: f64, mollifier: Mollifier) -> Result<Self> {
        check_sigma(sigma)?;
        mollifier.validate(&geometry)?;
        let variance = GffSampler::new(geometry.clone(), sigma, 0)?.point_variance(&mollifier);
        let multipliers = match mollifier.scheme {
            MollifierScheme::Lattice => None,
            _ => Some(mollifier.multipliers(&geometry)),
        };
        Ok(Self {
            geometry,
            sigma,
            mollifier,
            multipliers,
            variance,
        })
    }

    pub fn geometry(&self) -> &Arc<TorusGeometry> {
        &self.geometry
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn mollifier(&self) -> Mollifier {
        self.mollifier
    }

    /// `Var(phi_eps(x))` under the free field.
    pub fn variance(&self) -> f64 {
        self.variance
    }

    /// Mollify raw grid values (no mean handling).
    pub fn smooth_values(&self, values: &[f64]) -> Vec<f64> {
        match &self.multipliers {
            Some(m) => self.geometry.apply_multiplier(values, m),
            None => values.to_vec(),
        }
    }

    /// Cell masses for `m + phi0`, `phi0` given as raw zero-mean values.
    pub fn masses(&self, mean: f64, zero_mean: &[f64]) -> Vec<f64> {
        let a = self.geometry.cell_area();
        let shift = 2.0 * mean - 2.0 * self.variance;
        self.smooth_values(zero_mean)
            .into_iter()
            .map(|v| a * (2.0 * v + shift).exp())
            .collect()
    }

    pub fn build(&self, phi: &ScalarField) -> Result<GmcMeasure> {
        if **phi.geometry() != *self.geometry {
            return Err(Error::GeometryMismatch);
        }
        let masses = self.masses(phi.mean(), phi.zero_mean_values());
        Ok(GmcMeasure {
            geometry: self.geometry.clone(),
            masses,
            sigma: self.sigma,
            mollifier: self.mollifier,
        })
    }
}

/// Per-cell masses of a chaos measure.
#[derive(Debug, Clone)]
pub struct GmcMeasure {
    geometry: Arc<TorusGeometry>,
    masses: Vec<f64>,
    sigma: f64,
    mollifier: Mollifier,
}

impl GmcMeasure {
    /// Wrap precomputed masses.
    pub fn from_masses(
        geometry: Arc<TorusGeometry>,
        masses: Vec<f64>,
        sigma: f64,
        mollifier: Mollifier,
    ) -> Result<Self> {
        check_sigma(sigma)?;
        if masses.len() != geometry.len() {
            return Err(invalid("masses", "length != N^2"));
        }
        if masses.iter().any(|m| !(*m >= 0.0)) {
            return Err(invalid("masses", "negative or NaN cell mass"));
        }
        Ok(Self {
            geometry,
            masses,
            sigma,
            mollifier,
        })
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn gamma(&self) -> f64 {
        gamma_of_sigma(self.sigma)
    }

    pub fn mollifier(&self) -> Mollifier {
        self.mollifier
    }

    pub fn integrate(&self, f: &ScalarField) -> Result<f64> {
        integrate(f, self)
    }

    /// Cellwise `mass * exp(2 g)` for raw grid values `g`.
    pub fn reweighted(&self, g: &[f64]) -> GmcMeasure {
        GmcMeasure {
            masses: self
                .masses
                .iter()
                .zip(g)
                .map(|(m, v)| m * (2.0 * v).exp())
                .collect(),
            ..self.clone()
        }
    }
}

impl AreaMeasure for GmcMeasure {
    fn geometry(&self) -> &Arc<TorusGeometry> {
        &self.geometry
    }

    fn cell_mass(&self, i: usize) -> f64 {
        self.masses[i]
    }

    fn total_mass(&self) -> f64 {
        neumaier_sum(self.masses.iter().copied())
    }
}

pub fn build_gmc(phi: &ScalarField, sigma: f64, m: &Mollifier) -> Result<GmcMeasure> {
    GmcBuilder::new(phi.geometry().clone(), sigma, *m)?.build(phi)
}

/// Maximum relative cell deviation between the measure of `phi + f` and
/// the measure of `phi` reweighted by `e^{2 f_eps}`.
pub fn shift_check(phi: &ScalarField, f: &ScalarField, sigma: f64, m: &Mollifier) -> Result<f64> {
    let b = GmcBuilder::new(phi.geometry().clone(), sigma, *m)?;
    let shifted = b.build(&phi.add(f)?)?;
    let base = b.build(phi)?;
    let f_eps: Vec<f64> = b
        .smooth_values(f.zero_mean_values())
        .into_iter()
        .map(|v| v + f.mean())
        .collect();
    let expected = base.reweighted(&f_eps);
    Ok(shifted
        .masses()
        .iter()
        .zip(expected.masses())
        .map(|(a, b)| ((a - b) / b).abs())
        .fold(0.0, f64::max))
}

/// One row of the dyadic Cauchy diagnostic.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CauchyPoint {
    pub eps: f64,
    pub value: f64,
    /// `|A_eps(f) - A_{eps/2}(f)|`, absent for the last scale.
    pub increment: Option<f64>,
}

/// `A_eps(f)` for `eps, eps/2, ...` (`levels` scales, all resolvable) built
/// from the same field.
pub fn cauchy_diagnostic(
    phi: &ScalarField,
    f: &ScalarField,
    sigma: f64,
    m: &Mollifier,
    levels: usize,
) -> Result<Vec<CauchyPoint>> {
    let mut values = Vec::with_capacity(levels);
    let mut cur = *m;
    for _ in 0..levels {
        values.push((cur.eps, build_gmc(phi, sigma, &cur)?.integrate(f)?));
        cur = cur.halved();
    }
    Ok(values
        .iter()
        .enumerate()
        .map(|(i, &(eps, value))| CauchyPoint {
            eps,
            value,
            increment: values.get(i + 1).map(|n| (n.1 - value).abs()),
        })
        .collect())
}

/// Total masses of an ensemble at scale `eps` and at `eps/2`, built from
/// the same free-field samples.
#[derive(Debug, Clone, Serialize)]
pub struct MassEnsemble {
    pub sigma: f64,
    pub mollifier: Mollifier,
    pub totals: Vec<f64>,
    pub totals_half: Vec<f64>,
}

impl MassEnsemble {
    pub fn sample(
        geometry: Arc<TorusGeometry>,
        sigma: f64,
        m: Mollifier,
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        let sampler = GffSampler::new(geometry.clone(), sigma, seed)?;
        let coarse = GmcBuilder::new(geometry.clone(), sigma, m)?;
        let fine = GmcBuilder::new(geometry, sigma, m.halved())?;
        let pairs = crate::ensemble::map_replicas(n, |i| {
            let phi = sampler.sample(i as u64);
            let a: f64 = neumaier_sum(coarse.masses(0.0, phi.zero_mean_values()));
            let b: f64 = neumaier_sum(fine.masses(0.0, phi.zero_mean_values()));
            (a, b)
        });
        Ok(Self {
            sigma,
            mollifier: m,
            totals: pairs.iter().map(|p| p.0).collect(),
            totals_half: pairs.iter().map(|p| p.1).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MomentEstimate {
    pub p: f64,
    pub value: f64,
    pub stderr: f64,
    pub ci: (f64, f64),
    pub value_half: f64,
    pub stderr_half: f64,
    /// The estimates at `eps` and `eps/2` agree within three combined
    /// standard errors.
    pub stable: bool,
}

/// Positive moments of the total mass are finite only for `p < 4/gamma^2`.
pub fn moment_limit(gamma: f64) -> f64 {
    4.0 / (gamma * gamma)
}

/// Empirical `E[M(Lambda)^p]` with a percentile-bootstrap 95% interval.
pub fn mass_moment(ens: &MassEnsemble, p: f64, seed: u64) -> Result<MomentEstimate> {
    let gamma = gamma_of_sigma(ens.sigma);
    let limit = moment_limit(gamma);
    if p >= limit {
        return Err(Error::DivergentMoment { p, limit });
    }
    if ens.totals.len() < 2 {
        return Err(Error::InsufficientData("need at least two samples".into()));
    }
    let pow = |xs: &[f64]| -> Vec<f64> { xs.iter().map(|x| x.powf(p)).collect() };
    let a = pow(&ens.totals);
    let b = pow(&ens.totals_half);
    let (value, stderr) = (mean(&a), std_error(&a));
    let (value_half, stderr_half) = (mean(&b), std_error(&b));
    let ci = bootstrap_ci(&a, mean, 1000, 0.95, seed);
    Ok(MomentEstimate {
        p,
        value,
        stderr,
        ci,
        value_half,
        stderr_half,
        stable: (value - value_half).abs() <= 3.0 * (stderr.powi(2) + stderr_half.powi(2)).sqrt(),
    })
}

/// Number of cells within flat distance `eps` of each site, as an
/// indicator grid centred at site 0.
fn disk_indicator(g: &TorusGeometry, eps: f64) -> Vec<f64> {
    let origin = g.site(0);
    (0..g.len())
        .map(|i| {
            if g.distance(g.site(i), origin) <= eps {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// `sum_{y in B(x, eps)} values(y)` for every site `x`.
pub fn ball_sums(g: &TorusGeometry, values: &[f64], eps: f64) -> Vec<f64> {
    let d = g.forward(&disk_indicator(g, eps));
    let mut v = g.forward(values);
    for (a, b) in v.iter_mut().zip(&d) {
        // The disk is symmetric, so its transform is real up to rounding.
        *a *= Complex64::new(b.re, 0.0);
    }
    g.inverse(v)
}

#[derive(Debug, Clone)]
pub struct Inversion {
    pub field: ScalarField,
    /// Correlation with the ball-averaged reference, when one was supplied.
    pub quality: Option<f64>,
}

/// Recover the field from its chaos measure by ball masses at scale
/// `eps_probe`: `phi_hat = (1/2) log M(B(x, eps)) + (1 + gamma^2/4) log(1/eps)`,
/// shifted so that its spatial mean equals that of `reference` (or 0).
pub fn invert_gmc(
    m: &GmcMeasure,
    eps_probe: f64,
    reference: Option<&ScalarField>,
) -> Result<Inversion> {
    let g = m.geometry().clone();
    let min = Mollifier::min_eps(&g);
    if !(eps_probe >= min * (1.0 - 1e-12)) {
        return Err(Error::Unresolvable {
            eps: eps_probe,
            min,
        });
    }
    let gamma = m.gamma();
    let offset = (1.0 + gamma * gamma / 4.0) * (1.0 / eps_probe).ln();
    let sums = ball_sums(&g, m.masses(), eps_probe);
    let raw: Vec<f64> = sums
        .iter()
        .map(|s| 0.5 * s.max(f64::MIN_POSITIVE).ln() + offset)
        .collect();
    let est = ScalarField::from_values(g.clone(), raw);
    let target_mean = reference.map_or(0.0, |r| r.mean());
    let field = est.with_mean(target_mean);
    let quality = match reference {
        Some(r) => {
            let count = neumaier_sum(disk_indicator(&g, eps_probe));
            let avg: Vec<f64> = ball_sums(&g, &r.values(), eps_probe)
                .into_iter()
                .map(|s| s / count)
                .collect();
            Some(correlation(field.zero_mean_values(), &avg))
        }
        None => None,
    };
    Ok(Inversion { field, quality })
}

/// Mass-weighted mean of `X_eps = (2/gamma) phi_eps` under `m`, i.e. the
/// average of the coarse field at `m`-typical points.
pub fn thickness_statistic(m: &GmcMeasure, phi: &ScalarField, probe: &Mollifier) -> Result<f64> {
    let g = m.geometry();
    probe.validate(g)?;
    let smooth = crate::gff::mollify(phi, probe)?;
    let gamma = m.gamma();
    let num = neumaier_sum(
        m.masses()
            .iter()
            .enumerate()
            .map(|(i, w)| w * smooth.value(i)),
    );
    Ok(2.0 / gamma * num / m.total_mass())
}

/// Expected value of [`thickness_statistic`] (up to the ratio-of-means
/// approximation): `gamma * Cov(X_probe, X_m)`.
pub fn thickness_oracle(sampler: &GffSampler, measure_scale: &Mollifier, probe: &Mollifier) -> f64 {
    let gamma = gamma_of_sigma(sampler.sigma());
    let cov_phi = sampler.point_covariance(probe, measure_scale);
    // Cov(X, X') = (4/gamma^2) Cov(phi, phi').
    gamma * 4.0 / (gamma * gamma) * cov_phi
}
