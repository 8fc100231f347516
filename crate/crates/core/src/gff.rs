//! Gaussian free field on the torus with covariance `(sigma^2/2)(-Delta)^{-1}`,
//! mollifiers, and Cameron–Martin shifts.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lattice::{grad_inner, ScalarField, TorusGeometry};
use crate::rng::{fill_normals, Domain, StreamKey};
use crate::stats::neumaier_sum;

/// `2 sqrt(pi)`: the largest admissible noise strength.
pub const SIGMA_L1: f64 = 3.544_907_701_811_032;

/// `sqrt(2 pi)`: the total mass is square integrable below this.
pub const SIGMA_L2: f64 = 2.506_628_274_631_000_2;

/// Admissible noise strengths `0 <= sigma < 2 sqrt(pi)`.
pub fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= 0.0) {
        return Err(invalid("sigma", "sigma < 0"));
    }
    if sigma >= SIGMA_L1 {
        return Err(invalid("sigma", "sigma >= 2*sqrt(pi)"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MollifierScheme {
    /// Heat kernel at time `eps^2 / 2`.
    Heat,
    /// Uniform average over the circle of radius `eps`.
    Circle,
    /// No smoothing beyond the grid itself (the cell scale is the cutoff).
    Lattice,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mollifier {
    pub scheme: MollifierScheme,
    pub eps: f64,
}

impl Mollifier {
    pub fn heat(eps: f64) -> Self {
        Self {
            scheme: MollifierScheme::Heat,
            eps,
        }
    }

    pub fn circle(eps: f64) -> Self {
        Self {
            scheme: MollifierScheme::Circle,
            eps,
        }
    }

    /// Grid-scale regularization. `eps` is reported as `1/N`.
    pub fn lattice(geometry: &TorusGeometry) -> Self {
        Self {
            scheme: MollifierScheme::Lattice,
            eps: 1.0 / geometry.n() as f64,
        }
    }

    /// Smallest scale that still spans two cells.
    pub fn min_eps(geometry: &TorusGeometry) -> f64 {
        2.0 / geometry.n() as f64
    }

    pub fn validate(&self, geometry: &TorusGeometry) -> Result<()> {
        if self.scheme == MollifierScheme::Lattice {
            return Ok(());
        }
        let min = Self::min_eps(geometry);
        if !(self.eps >= min * (1.0 - 1e-12)) {
            return Err(Error::Unresolvable { eps: self.eps, min });
        }
        Ok(())
    }

    /// Fourier multiplier at eigenvalue `lambda`.
    pub fn multiplier(&self, lambda: f64) -> f64 {
        match self.scheme {
            MollifierScheme::Heat => (-0.5 * self.eps * self.eps * lambda).exp(),
            MollifierScheme::Circle => puruspe::Jn(0, self.eps * lambda.sqrt()),
            MollifierScheme::Lattice => 1.0,
        }
    }

    pub fn multipliers(&self, geometry: &TorusGeometry) -> Vec<f64> {
        geometry
            .eigenvalues()
            .iter()
            .map(|&l| self.multiplier(l))
            .collect()
    }

    /// The same scheme at half the scale.
    pub fn halved(&self) -> Self {
        Self {
            eps: self.eps / 2.0,
            ..*self
        }
    }
}

/// Smooth `phi` with `m`; the mean part is unchanged.
pub fn mollify(phi: &ScalarField, m: &Mollifier) -> Result<ScalarField> {
    m.validate(phi.geometry())?;
    if m.scheme == MollifierScheme::Lattice {
        return Ok(phi.clone());
    }
    Ok(phi.filtered(&m.multipliers(phi.geometry())))
}

#[derive(Debug, Clone)]
pub struct GffSampler {
    geometry: Arc<TorusGeometry>,
    sigma: f64,
    seed: u64,
    // Multiplier taking the DFT of unit white noise to the DFT of the field.
    noise_gain: Vec<f64>,
}

impl GffSampler {
    pub fn new(geometry: Arc<TorusGeometry>, sigma: f64, seed: u64) -> Result<Self> {
        check_sigma(sigma)?;
        let n = geometry.n() as f64;
        let area = geometry.area();
        let noise_gain = geometry
            .eigenvalues()
            .iter()
            .map(|&l| {
                if l > 0.0 {
                    n * sigma / (2.0 * l).sqrt() / area.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self {
            geometry,
            sigma,
            seed,
            noise_gain,
        })
    }

    pub fn geometry(&self) -> &Arc<TorusGeometry> {
        &self.geometry
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Standard deviation of the `L^2`-normalized coefficient of mode `k`.
    pub fn mode_std(&self, k: usize) -> f64 {
        let l = self.geometry.eigenvalues()[k];
        if l > 0.0 {
            self.sigma / (2.0 * l).sqrt()
        } else {
            0.0
        }
    }

    /// Draw number `index` of this sampler.
    pub fn sample(&self, index: u64) -> ScalarField {
        self.sample_with_key(StreamKey::new(self.seed, Domain::Gff, index, 0))
    }

    pub fn sample_with_key(&self, key: StreamKey) -> ScalarField {
        let mut noise = vec![0.0; self.geometry.len()];
        fill_normals(&mut key.rng(), &mut noise);
        self.color(&noise)
    }

    /// Turn unit white noise on the sites into a field sample. Linear in
    /// `noise`.
    pub fn color(&self, noise: &[f64]) -> ScalarField {
        let mut v = self.geometry.apply_multiplier(noise, &self.noise_gain);
        // Mode 0 is removed exactly; subtract the rounding residue so the
        // field passes the zero-mean check.
        let m = neumaier_sum(v.iter().copied()) / v.len() as f64;
        v.iter_mut().for_each(|x| *x -= m);
        ScalarField::new(self.geometry.clone(), 0.0, v).expect("sampled field has zero mean")
    }

    /// Exact `Var(phi_eps(x))` by summing over modes; the same at every
    /// site.
    pub fn point_variance(&self, m: &Mollifier) -> f64 {
        let area = self.geometry.area();
        neumaier_sum(self.geometry.eigenvalues().iter().skip(1).map(|&l| {
            let mk = m.multiplier(l);
            self.sigma * self.sigma / (2.0 * l) * mk * mk / area
        }))
    }

    /// Exact `Cov(phi_eps1(x), phi_eps2(x))`.
    pub fn point_covariance(&self, m1: &Mollifier, m2: &Mollifier) -> f64 {
        let area = self.geometry.area();
        neumaier_sum(self.geometry.eigenvalues().iter().skip(1).map(|&l| {
            self.sigma * self.sigma / (2.0 * l) * m1.multiplier(l) * m2.multiplier(l) / area
        }))
    }
}

/// `L^2(omega_0)`-normalized Fourier coefficients of a field.
pub fn mode_coefficients(phi: &ScalarField) -> Vec<Complex64> {
    let g = phi.geometry();
    let c = g.spectral_to_l2();
    let mut spec = g.forward(phi.zero_mean_values());
    spec.iter_mut().for_each(|z| *z *= c);
    spec[0] = Complex64::new(phi.mean() * g.area().sqrt(), 0.0);
    spec
}

/// `phi + t h`.
pub fn cm_shift(phi: &ScalarField, h: &ScalarField, t: f64) -> Result<ScalarField> {
    phi.axpy(t, h)
}

/// Log density of the law of `phi + t h` with respect to the GFF law,
/// evaluated at `phi`: `(2t/sigma^2) <grad phi, grad h> - (t^2/sigma^2) |grad h|^2`.
pub fn cm_log_weight(phi: &ScalarField, h: &ScalarField, t: f64, sigma: f64) -> Result<f64> {
    if t == 0.0 {
        return Ok(0.0);
    }
    let s2 = sigma * sigma;
    Ok(2.0 * t / s2 * grad_inner(phi, h)? - t * t / s2 * grad_inner(h, h)?)
}

/// Asymptotic slope of `Var(phi_eps)` against `log(1/eps)`.
pub fn variance_log_slope(sigma: f64) -> f64 {
    sigma * sigma / (4.0 * PI)
}
