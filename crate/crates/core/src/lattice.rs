//! Discretized flat torus `C / (Z + tau Z)`.
//!
//! Sites are the points `x = (j + l * tau) / N` for `0 <= j, l < N`, stored
//! row-major as `j * N + l`. Spectral arrays use the same layout in mode
//! space: entry `ka * N + kb` holds the coefficient of
//! `exp(2 pi i (a s + b u))`, where `(s, u)` are lattice coordinates and
//! `(a, b)` the signed versions of `(ka, kb)`.
//!
//! The Laplacian is the exact Fourier multiplier `-lambda_k` with
//! `lambda_k = |2 pi k*|^2`, `k*` ranging over the dual lattice.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

pub use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{invalid, Error, Result};
use crate::stats::neumaier_sum;

/// Relative tolerance used for zero-mean checks and other rounding-level
/// comparisons on grid data.
pub const TOL_MEAN: f64 = 1e-10;

pub struct TorusGeometry {
    n: usize,
    tau: Complex64,
    cell_area: f64,
    eigenvalues: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for TorusGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TorusGeometry")
            .field("n", &self.n)
            .field("tau", &self.tau)
            .finish()
    }
}

impl PartialEq for TorusGeometry {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.tau == other.tau
    }
}

impl TorusGeometry {
    pub fn new(n: usize, tau: Complex64) -> Result<Arc<Self>> {
        if n < 4 || !n.is_power_of_two() {
            return Err(invalid("n", format!("{n} is not a power of two >= 4")));
        }
        if !(tau.im > 0.0) || !tau.re.is_finite() || !tau.im.is_finite() {
            return Err(invalid("tau", "Im(tau) <= 0"));
        }
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let ifft = planner.plan_fft_inverse(n);
        let mut eigenvalues = vec![0.0; n * n];
        let half = (n / 2) as i64;
        for ka in 0..n {
            for kb in 0..n {
                let a = signed_index(ka, n);
                let b = signed_index(kb, n);
                let lam = if a == -half || b == -half {
                    // Nyquist rows: average with the conjugate representative
                    // so that the multiplier stays Hermitian for oblique tau.
                    0.5 * (dual_eigenvalue(a as f64, b as f64, tau)
                        + dual_eigenvalue(-(a as f64), -(b as f64), tau))
                } else {
                    dual_eigenvalue(a as f64, b as f64, tau)
                };
                eigenvalues[ka * n + kb] = lam;
            }
        }
        Ok(Arc::new(Self {
            n,
            tau,
            cell_area: tau.im / (n * n) as f64,
            eigenvalues,
            fft,
            ifft,
        }))
    }

    /// Square torus `tau = i`.
    pub fn square(n: usize) -> Result<Arc<Self>> {
        Self::new(n, Complex64::new(0.0, 1.0))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn tau(&self) -> Complex64 {
        self.tau
    }

    /// Number of sites, `N^2`.
    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_area
    }

    /// Total flat area `Im tau`.
    pub fn area(&self) -> f64 {
        self.tau.im
    }

    /// Gauss curvature of the reference metric.
    pub fn gauss_curvature(&self) -> f64 {
        0.0
    }

    /// Laplacian eigenvalues `lambda_k >= 0` in spectral layout.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(0.0, f64::max)
    }

    /// Spectral index of the signed mode `(a, b)`.
    pub fn mode_index(&self, a: i64, b: i64) -> usize {
        let n = self.n as i64;
        (a.rem_euclid(n) * n + b.rem_euclid(n)) as usize
    }

    pub fn signed_mode(&self, k: usize) -> (i64, i64) {
        (
            signed_index(k / self.n, self.n),
            signed_index(k % self.n, self.n),
        )
    }

    /// Lattice coordinates `(s, u)` in `[0, 1)^2` of site `i`.
    pub fn lattice_coords(&self, i: usize) -> (f64, f64) {
        let n = self.n as f64;
        ((i / self.n) as f64 / n, (i % self.n) as f64 / n)
    }

    /// Euclidean position `s + u tau` of site `i`.
    pub fn site(&self, i: usize) -> (f64, f64) {
        let (s, u) = self.lattice_coords(i);
        (s + u * self.tau.re, u * self.tau.im)
    }

    /// Index of the site nearest (in lattice coordinates) to a point given
    /// in Euclidean coordinates.
    pub fn nearest_site(&self, x: (f64, f64)) -> usize {
        let u = x.1 / self.tau.im;
        let s = x.0 - u * self.tau.re;
        let n = self.n as f64;
        let j = ((s * n).round() as i64).rem_euclid(self.n as i64) as usize;
        let l = ((u * n).round() as i64).rem_euclid(self.n as i64) as usize;
        j * self.n + l
    }

    /// Flat-torus distance between two Euclidean points.
    pub fn distance(&self, p: (f64, f64), q: (f64, f64)) -> f64 {
        // Reduce to lattice coordinates in (-1/2, 1/2], then scan neighbours.
        let dx = p.0 - q.0;
        let dy = p.1 - q.1;
        let u = dy / self.tau.im;
        let s = dx - u * self.tau.re;
        let s0 = s - s.round();
        let u0 = u - u.round();
        let mut best = f64::INFINITY;
        for ds in -2..=2 {
            for du in -2..=2 {
                let ss = s0 + ds as f64;
                let uu = u0 + du as f64;
                let x = ss + uu * self.tau.re;
                let y = uu * self.tau.im;
                best = best.min((x * x + y * y).sqrt());
            }
        }
        best
    }

    /// Unnormalized forward DFT of a real grid.
    pub fn forward(&self, values: &[f64]) -> Vec<Complex64> {
        assert_eq!(values.len(), self.len());
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft2(&mut buf, false);
        buf
    }

    /// Inverse DFT (including the `1/N^2` factor), returning the real part.
    pub fn inverse(&self, mut spectrum: Vec<Complex64>) -> Vec<f64> {
        assert_eq!(spectrum.len(), self.len());
        self.fft2(&mut spectrum, true);
        let norm = 1.0 / self.len() as f64;
        spectrum.into_iter().map(|c| c.re * norm).collect()
    }

    /// Multiply each mode by `multiplier[k]`.
    pub fn apply_multiplier(&self, values: &[f64], multiplier: &[f64]) -> Vec<f64> {
        let mut spec = self.forward(values);
        for (c, m) in spec.iter_mut().zip(multiplier) {
            *c *= *m;
        }
        self.inverse(spec)
    }

    /// `Delta_0` applied to raw grid values.
    pub fn laplacian_values(&self, values: &[f64]) -> Vec<f64> {
        let mut spec = self.forward(values);
        for (c, lam) in spec.iter_mut().zip(&self.eigenvalues) {
            *c *= -lam;
        }
        self.inverse(spec)
    }

    /// Coefficient of `values` on the `L^2(omega_0)`-normalized mode
    /// `exp(2 pi i (a s + b u)) / sqrt(Im tau)`.
    pub fn mode_coefficient(&self, values: &[f64], a: i64, b: i64) -> Complex64 {
        let spec = self.forward(values);
        spec[self.mode_index(a, b)] * self.spectral_to_l2()
    }

    /// Factor converting raw DFT coefficients to `L^2(omega_0)` coefficients.
    pub fn spectral_to_l2(&self) -> f64 {
        self.area().sqrt() / self.len() as f64
    }

    /// Real Fourier mode `cos(2 pi (a s + b u) + phase)` sampled on the sites.
    pub fn mode_values(&self, a: i64, b: i64, phase: f64) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                let (s, u) = self.lattice_coords(i);
                (2.0 * PI * (a as f64 * s + b as f64 * u) + phase).cos()
            })
            .collect()
    }

    /// Eigenvalue of the (non-Nyquist) signed mode `(a, b)`.
    pub fn eigenvalue(&self, a: i64, b: i64) -> f64 {
        self.eigenvalues[self.mode_index(a, b)]
    }

    fn fft2(&self, buf: &mut [Complex64], inverse: bool) {
        let plan = if inverse { &self.ifft } else { &self.fft };
        let mut scratch = vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
        plan.process_with_scratch(buf, &mut scratch);
        transpose(buf, self.n);
        plan.process_with_scratch(buf, &mut scratch);
        transpose(buf, self.n);
    }
}

fn signed_index(k: usize, n: usize) -> i64 {
    if k < n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// `|2 pi k*|^2` for the dual-lattice vector of the mode `(a, b)`.
fn dual_eigenvalue(a: f64, b: f64, tau: Complex64) -> f64 {
    let kx = a;
    let ky = (b - a * tau.re) / tau.im;
    4.0 * PI * PI * (kx * kx + ky * ky)
}

fn transpose(buf: &mut [Complex64], n: usize) {
    for r in 0..n {
        for c in (r + 1)..n {
            buf.swap(r * n + c, c * n + r);
        }
    }
}

/// Real field `phi = m + phi_0` on the torus with an explicit mean part.
#[derive(Clone, Debug)]
pub struct ScalarField {
    geometry: Arc<TorusGeometry>,
    mean: f64,
    zero_mean: Vec<f64>,
}

impl ScalarField {
    pub fn new(geometry: Arc<TorusGeometry>, mean: f64, zero_mean: Vec<f64>) -> Result<Self> {
        if zero_mean.len() != geometry.len() {
            return Err(invalid(
                "zero_mean_values",
                format!("length {} != N^2 = {}", zero_mean.len(), geometry.len()),
            ));
        }
        let sum = neumaier_sum(zero_mean.iter().copied());
        let scale = zero_mean.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if sum.abs() > TOL_MEAN * geometry.len() as f64 * scale {
            return Err(invalid(
                "zero_mean_values",
                format!("sum {sum:e} exceeds tol_mean * N^2"),
            ));
        }
        Ok(Self {
            geometry,
            mean,
            zero_mean,
        })
    }

    /// Split raw grid values into mean and zero-mean parts.
    pub fn from_values(geometry: Arc<TorusGeometry>, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), geometry.len());
        let mean = neumaier_sum(values.iter().copied()) / values.len() as f64;
        let zero_mean = values.into_iter().map(|v| v - mean).collect();
        Self {
            geometry,
            mean,
            zero_mean,
        }
    }

    pub fn from_fn<F: Fn(f64, f64) -> f64>(geometry: Arc<TorusGeometry>, f: F) -> Self {
        let values = (0..geometry.len())
            .map(|i| {
                let (x, y) = geometry.site(i);
                f(x, y)
            })
            .collect();
        Self::from_values(geometry, values)
    }

    pub fn constant(geometry: Arc<TorusGeometry>, c: f64) -> Self {
        let n = geometry.len();
        Self {
            geometry,
            mean: c,
            zero_mean: vec![0.0; n],
        }
    }

    pub fn zero(geometry: Arc<TorusGeometry>) -> Self {
        Self::constant(geometry, 0.0)
    }

    /// Real part of a single Fourier mode.
    pub fn mode(geometry: Arc<TorusGeometry>, a: i64, b: i64, phase: f64) -> Self {
        let v = geometry.mode_values(a, b, phase);
        Self::from_values(geometry, v)
    }

    pub fn geometry(&self) -> &Arc<TorusGeometry> {
        &self.geometry
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn zero_mean_values(&self) -> &[f64] {
        &self.zero_mean
    }

    pub fn values(&self) -> Vec<f64> {
        self.zero_mean.iter().map(|v| v + self.mean).collect()
    }

    pub fn value(&self, i: usize) -> f64 {
        self.mean + self.zero_mean[i]
    }

    pub fn with_mean(&self, mean: f64) -> Self {
        Self {
            mean,
            ..self.clone()
        }
    }

    pub fn zero_mean_part(&self) -> Self {
        self.with_mean(0.0)
    }

    pub fn same_geometry(&self, other: &ScalarField) -> Result<()> {
        if Arc::ptr_eq(&self.geometry, &other.geometry) || *self.geometry == *other.geometry {
            Ok(())
        } else {
            Err(Error::GeometryMismatch)
        }
    }

    /// `self + t * other`.
    pub fn axpy(&self, t: f64, other: &ScalarField) -> Result<Self> {
        self.same_geometry(other)?;
        Ok(Self {
            geometry: self.geometry.clone(),
            mean: self.mean + t * other.mean,
            zero_mean: self
                .zero_mean
                .iter()
                .zip(&other.zero_mean)
                .map(|(a, b)| a + t * b)
                .collect(),
        })
    }

    pub fn add(&self, other: &ScalarField) -> Result<Self> {
        self.axpy(1.0, other)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            geometry: self.geometry.clone(),
            mean: self.mean * c,
            zero_mean: self.zero_mean.iter().map(|v| v * c).collect(),
        }
    }

    /// Pointwise product (returns a fresh decomposition).
    pub fn product(&self, other: &ScalarField) -> Result<Self> {
        self.same_geometry(other)?;
        let v = (0..self.geometry.len())
            .map(|i| self.value(i) * other.value(i))
            .collect();
        Ok(Self::from_values(self.geometry.clone(), v))
    }

    /// `Delta_0 f`, computed spectrally; the result has mean 0.
    pub fn laplacian(&self) -> ScalarField {
        let mut lap = self.geometry.laplacian_values(&self.zero_mean);
        let m = neumaier_sum(lap.iter().copied()) / lap.len() as f64;
        lap.iter_mut().for_each(|v| *v -= m);
        Self {
            geometry: self.geometry.clone(),
            mean: 0.0,
            zero_mean: lap,
        }
    }

    /// `(-Delta_0)^{-1}` on the zero-mean part; the result has mean 0.
    pub fn inverse_laplacian(&self) -> ScalarField {
        let mult: Vec<f64> = self
            .geometry
            .eigenvalues()
            .iter()
            .map(|&l| if l > 0.0 { 1.0 / l } else { 0.0 })
            .collect();
        self.zero_mean_part().filtered(&mult)
    }

    /// Apply a Fourier multiplier to the zero-mean part; the mean part is
    /// kept as is.
    pub fn filtered(&self, multiplier: &[f64]) -> ScalarField {
        let mut v = self.geometry.apply_multiplier(&self.zero_mean, multiplier);
        let m = neumaier_sum(v.iter().copied()) / v.len() as f64;
        v.iter_mut().for_each(|x| *x -= m);
        Self {
            geometry: self.geometry.clone(),
            mean: self.mean,
            zero_mean: v,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.zero_mean
            .iter()
            .fold(0.0f64, |m, v| m.max((v + self.mean).abs()))
    }

    /// Dirichlet energy `int |grad f|^2 omega_0`.
    pub fn dirichlet_energy(&self) -> f64 {
        grad_inner(self, self).expect("same field")
    }
}

/// `int grad h . grad phi omega_0 = sum_k lambda_k h_k conj(phi_k)`.
///
/// Only nonzero modes contribute, so constants added to either argument
/// change nothing.
pub fn grad_inner(h: &ScalarField, phi: &ScalarField) -> Result<f64> {
    h.same_geometry(phi)?;
    let g = h.geometry();
    let hs = g.forward(h.zero_mean_values());
    let ps = g.forward(phi.zero_mean_values());
    Ok(spectral_grad_inner(g, &hs, &ps))
}

/// Same as [`grad_inner`] on precomputed raw spectra.
pub fn spectral_grad_inner(g: &TorusGeometry, hs: &[Complex64], ps: &[Complex64]) -> f64 {
    let norm = g.spectral_to_l2().powi(2);
    let s = neumaier_sum(
        g.eigenvalues()
            .iter()
            .zip(hs.iter().zip(ps))
            .skip(1)
            .map(|(lam, (a, b))| lam * (a * b.conj()).re),
    );
    s * norm
}

/// Anything that assigns a mass to every lattice cell.
pub trait AreaMeasure {
    fn geometry(&self) -> &Arc<TorusGeometry>;
    fn cell_mass(&self, i: usize) -> f64;

    fn total_mass(&self) -> f64 {
        neumaier_sum((0..self.geometry().len()).map(|i| self.cell_mass(i)))
    }
}

/// The flat area form `omega_0`.
#[derive(Debug, Clone)]
pub struct FlatArea {
    geometry: Arc<TorusGeometry>,
}

impl FlatArea {
    pub fn new(geometry: Arc<TorusGeometry>) -> Self {
        Self { geometry }
    }
}

impl AreaMeasure for FlatArea {
    fn geometry(&self) -> &Arc<TorusGeometry> {
        &self.geometry
    }

    fn cell_mass(&self, _i: usize) -> f64 {
        self.geometry.cell_area()
    }

    fn total_mass(&self) -> f64 {
        self.geometry.area()
    }
}

/// `sum_cells f(site) * mass(cell)`.
pub fn integrate<M: AreaMeasure + ?Sized>(f: &ScalarField, measure: &M) -> Result<f64> {
    if !Arc::ptr_eq(f.geometry(), measure.geometry()) && **f.geometry() != **measure.geometry() {
        return Err(Error::GeometryMismatch);
    }
    Ok(integrate_values(f.zero_mean_values(), measure) + f.mean() * measure.total_mass())
}

/// Integrate raw grid values.
pub fn integrate_values<M: AreaMeasure + ?Sized>(values: &[f64], measure: &M) -> f64 {
    assert_eq!(values.len(), measure.geometry().len());
    neumaier_sum(
        values
            .iter()
            .enumerate()
            .map(|(i, v)| v * measure.cell_mass(i)),
    )
}
