//! Monte Carlo checks of the integral identities.
//!
//! * Liouville integration by parts: for `nu = e^{-(lambda/sigma^2) M_phi(1)} dm x mu(d phi_0)`,
//!   `E_nu[G(phi) <grad phi, grad h>] = E_nu[(sigma^2/2) D_h G - lambda G M_phi(h)]`.
//!   The zero mode `m` is integrated by quadrature per free-field sample.
//! * Drift and quadratic variation of `A_t(f)` along recorded trajectories.

use std::sync::Arc;

use serde::Serialize;

use crate::ensemble::map_replicas;
use crate::error::{invalid, Error, Result};
use crate::gff::{GffSampler, Mollifier};
use crate::gmc::{GmcBuilder, GmcMeasure};
use crate::lattice::{grad_inner, AreaMeasure, ScalarField, TorusGeometry};
use crate::rng::{Domain, StreamKey};
use crate::srf::{pair_list, RunStatus, TrajectoryRecord, Window};
use crate::stats::{
    cluster_ols, mean, neumaier_sum, ratio_of_sums, std_error, Estimate, LinearFit,
};

/// `C^infinity` bump supported on `(lo, hi)`, normalised to 1 at the centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bump1d {
    pub lo: f64,
    pub hi: f64,
}

impl Bump1d {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(invalid("support", "degenerate support (a >= b)"));
        }
        Ok(Self { lo, hi })
    }

    /// Value and first two derivatives.
    pub fn eval(&self, y: f64) -> (f64, f64, f64) {
        let s = 2.0 / (self.hi - self.lo);
        let z = (2.0 * y - self.lo - self.hi) / (self.hi - self.lo);
        if z.abs() >= 1.0 {
            return (0.0, 0.0, 0.0);
        }
        let w = 1.0 - z * z;
        let v = (1.0 - 1.0 / w).exp();
        // d/dz exp(-1/w) = -2z/w^2 * value
        let g = -2.0 * z / (w * w);
        let dg = -2.0 / (w * w) - 8.0 * z * z / (w * w * w);
        (v, v * g * s, v * (g * g + dg) * s * s)
    }
}

/// `G(phi) = q(M(f_0), ..., M(f_k))` with `f_0 = 1` and
/// `q(y) = prod_t psi_t(y_{c_t})`, each `psi_t` a [`Bump1d`] acting on
/// coordinate `c_t`.
#[derive(Debug, Clone)]
pub struct TestFunctional {
    pub name: String,
    /// `f_1..f_k`.
    pub observables: Vec<ScalarField>,
    pub factors: Vec<(usize, Bump1d)>,
}

impl TestFunctional {
    pub fn new(
        name: impl Into<String>,
        observables: Vec<ScalarField>,
        factors: Vec<(usize, Bump1d)>,
    ) -> Result<Self> {
        let k = observables.len();
        if factors.iter().any(|(c, _)| *c > k) {
            return Err(invalid("factors", "coordinate index out of range"));
        }
        if !factors.iter().any(|(c, _)| *c == 0) {
            return Err(invalid(
                "factors",
                "q must be compactly supported in the total-mass coordinate",
            ));
        }
        Ok(Self {
            name: name.into(),
            observables,
            factors,
        })
    }

    pub fn arity(&self) -> usize {
        self.observables.len() + 1
    }

    /// Support of `q` in the total-mass coordinate.
    pub fn mass_window(&self) -> (f64, f64) {
        self.factors
            .iter()
            .filter(|(c, _)| *c == 0)
            .fold((f64::NEG_INFINITY, f64::INFINITY), |(lo, hi), (_, b)| {
                (lo.max(b.lo), hi.min(b.hi))
            })
    }

    /// Support box of `q` (unconstrained coordinates are unbounded).
    pub fn support_box(&self) -> Vec<(f64, f64)> {
        let mut out = vec![(f64::NEG_INFINITY, f64::INFINITY); self.arity()];
        for (c, b) in &self.factors {
            out[*c] = (out[*c].0.max(b.lo), out[*c].1.min(b.hi));
        }
        out
    }

    pub fn q(&self, y: &[f64]) -> f64 {
        self.factors.iter().map(|(c, b)| b.eval(y[*c]).0).product()
    }

    pub fn gradient(&self, y: &[f64]) -> Vec<f64> {
        let vals: Vec<(f64, f64, f64)> = self.factors.iter().map(|(c, b)| b.eval(y[*c])).collect();
        let mut g = vec![0.0; self.arity()];
        for (t, (c, _)) in self.factors.iter().enumerate() {
            let mut p = vals[t].1;
            for (s, v) in vals.iter().enumerate() {
                if s != t {
                    p *= v.0;
                }
            }
            g[*c] += p;
        }
        g
    }

    pub fn hessian(&self, y: &[f64]) -> Vec<Vec<f64>> {
        let vals: Vec<(f64, f64, f64)> = self.factors.iter().map(|(c, b)| b.eval(y[*c])).collect();
        let k = self.arity();
        let mut h = vec![vec![0.0; k]; k];
        for (t, (ct, _)) in self.factors.iter().enumerate() {
            for (u, (cu, _)) in self.factors.iter().enumerate() {
                let mut p = 1.0;
                for (s, v) in vals.iter().enumerate() {
                    p *= if s == t && s == u {
                        v.2
                    } else if s == t || s == u {
                        v.1
                    } else {
                        v.0
                    };
                }
                h[*ct][*cu] += p;
            }
        }
        h
    }

    /// `(M(1), M(f_1), ..., M(f_k))`.
    pub fn coordinates(&self, m: &GmcMeasure) -> Result<Vec<f64>> {
        let mut y = vec![m.total_mass()];
        for f in &self.observables {
            y.push(m.integrate(f)?);
        }
        Ok(y)
    }

    pub fn evaluate(&self, m: &GmcMeasure) -> Result<f64> {
        Ok(self.q(&self.coordinates(m)?))
    }

    /// The functional `G * H` (observables concatenated).
    pub fn product(&self, other: &TestFunctional) -> TestFunctional {
        let shift = self.observables.len();
        let mut observables = self.observables.clone();
        observables.extend(other.observables.iter().cloned());
        let mut factors = self.factors.clone();
        factors.extend(
            other
                .factors
                .iter()
                .map(|(c, b)| (if *c == 0 { 0 } else { c + shift }, *b)),
        );
        TestFunctional {
            name: format!("{}*{}", self.name, other.name),
            observables,
            factors,
        }
    }
}

/// `h` smoothed the same way as `m`'s field.
fn smoothed_direction(m: &GmcMeasure, h: &ScalarField) -> Result<Vec<f64>> {
    let hs = crate::gff::mollify(h, &m.mollifier())?;
    Ok(hs.values())
}

/// `D_h G = 2 sum_i d_i q(M(f_0..f_k)) M(f_i h_eps)`; exact for the
/// discrete measure, where moving the field by `t h` multiplies cell masses
/// by `e^{2 t h_eps}`.
pub fn frechet(g: &TestFunctional, h: &ScalarField, m: &GmcMeasure) -> Result<f64> {
    if **h.geometry() != **m.geometry() {
        return Err(Error::GeometryMismatch);
    }
    let hs = smoothed_direction(m, h)?;
    let y = g.coordinates(m)?;
    let grad = g.gradient(&y);
    let masses = m.masses();
    let mut total = 2.0 * grad[0] * neumaier_sum(masses.iter().zip(&hs).map(|(w, v)| w * v));
    for (i, f) in g.observables.iter().enumerate() {
        if grad[i + 1] == 0.0 {
            continue;
        }
        let s = neumaier_sum((0..masses.len()).map(|c| masses[c] * f.value(c) * hs[c]));
        total += 2.0 * grad[i + 1] * s;
    }
    Ok(total)
}

/// `G` at the field shifted by `t h`, through shift covariance.
pub fn shifted_value(g: &TestFunctional, h: &ScalarField, m: &GmcMeasure, t: f64) -> Result<f64> {
    let hs = smoothed_direction(m, h)?;
    let scaled: Vec<f64> = hs.iter().map(|v| t * v).collect();
    g.evaluate(&m.reweighted(&scaled))
}

/// Vector-valued adaptive Simpson rule. Returns the integrals, an error
/// estimate per component, and the number of integrand evaluations.
pub fn adaptive_simpson<F: Fn(f64, &mut [f64])>(
    f: &F,
    a: f64,
    b: f64,
    dim: usize,
    tol: f64,
) -> (Vec<f64>, Vec<f64>, usize) {
    let mut fa = vec![0.0; dim];
    let mut fm = vec![0.0; dim];
    let mut fb = vec![0.0; dim];
    f(a, &mut fa);
    f(0.5 * (a + b), &mut fm);
    f(b, &mut fb);
    let whole: Vec<f64> = (0..dim)
        .map(|i| (b - a) / 6.0 * (fa[i] + 4.0 * fm[i] + fb[i]))
        .collect();
    let mut out = vec![0.0; dim];
    let mut err = vec![0.0; dim];
    let mut evals = 3;
    // Force a few initial subdivisions so narrow bumps are not missed.
    simpson_rec(
        f, a, b, &fa, &fm, &fb, &whole, tol, 50, 4, &mut out, &mut err, &mut evals,
    );
    (out, err, evals)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F: Fn(f64, &mut [f64])>(
    f: &F,
    a: f64,
    b: f64,
    fa: &[f64],
    fm: &[f64],
    fb: &[f64],
    whole: &[f64],
    tol: f64,
    depth: u32,
    min_depth: u32,
    out: &mut [f64],
    err: &mut [f64],
    evals: &mut usize,
) {
    let dim = fa.len();
    let m = 0.5 * (a + b);
    let mut flm = vec![0.0; dim];
    let mut frm = vec![0.0; dim];
    f(0.5 * (a + m), &mut flm);
    f(0.5 * (m + b), &mut frm);
    *evals += 2;
    let h6 = (b - a) / 12.0;
    let left: Vec<f64> = (0..dim)
        .map(|i| h6 * (fa[i] + 4.0 * flm[i] + fm[i]))
        .collect();
    let right: Vec<f64> = (0..dim)
        .map(|i| h6 * (fm[i] + 4.0 * frm[i] + fb[i]))
        .collect();
    let delta = (0..dim)
        .map(|i| (left[i] + right[i] - whole[i]).abs())
        .fold(0.0, f64::max);
    if depth == 0 || (min_depth == 0 && delta <= 15.0 * tol) {
        for i in 0..dim {
            let d = left[i] + right[i] - whole[i];
            out[i] += left[i] + right[i] + d / 15.0;
            err[i] += d.abs() / 15.0;
        }
        return;
    }
    let md = min_depth.saturating_sub(1);
    simpson_rec(
        f,
        a,
        m,
        fa,
        &flm,
        fm,
        &left,
        0.5 * tol,
        depth - 1,
        md,
        out,
        err,
        evals,
    );
    simpson_rec(
        f,
        m,
        b,
        fm,
        &frm,
        fb,
        &right,
        0.5 * tol,
        depth - 1,
        md,
        out,
        err,
        evals,
    );
}

#[derive(Debug, Clone, Serialize)]
pub struct IbpReport {
    pub functional: String,
    pub direction: String,
    pub sigma: f64,
    pub lambda: f64,
    pub lhs: Estimate,
    pub rhs: Estimate,
    /// Standard error of the paired difference (floored by the quadrature
    /// error bound).
    pub diff_stderr: f64,
    pub z: f64,
    pub n: usize,
    /// Mean number of quadrature nodes per sample.
    pub nodes: f64,
    pub seed: u64,
}

/// Per-sample ingredients shared by every (G, h) pair.
struct SampleTerms {
    lhs: Vec<f64>,
    rhs: Vec<f64>,
    err: Vec<f64>,
    nodes: Vec<usize>,
}

/// Setup for [`ibp_residual`].
#[derive(Debug, Clone)]
pub struct IbpSetup {
    pub geometry: Arc<TorusGeometry>,
    pub sigma: f64,
    pub lambda: f64,
    pub mollifier: Mollifier,
    pub n_samples: usize,
    pub seed: u64,
    /// Absolute tolerance of the m-quadrature.
    pub quad_tol: f64,
}

/// Estimate both sides of the Liouville integration-by-parts identity for
/// every pair in `functionals x directions` from one set of free-field
/// samples. Reports are ordered functional-major.
pub fn ibp_catalog(
    setup: &IbpSetup,
    functionals: &[TestFunctional],
    directions: &[(String, ScalarField)],
) -> Result<Vec<IbpReport>> {
    if setup.n_samples < 2 {
        return Err(Error::InsufficientData("need at least two samples".into()));
    }
    for g in functionals {
        let (a, b) = g.mass_window();
        if !(a > 0.0 && a < b) {
            return Err(invalid("support", "degenerate support (a >= b)"));
        }
    }
    let sampler = GffSampler::new(setup.geometry.clone(), setup.sigma, setup.seed)?;
    let builder = GmcBuilder::new(setup.geometry.clone(), setup.sigma, setup.mollifier)?;
    let smooth_dirs: Vec<Vec<f64>> = directions
        .iter()
        .map(|(_, h)| crate::gff::mollify(h, &setup.mollifier).map(|x| x.values()))
        .collect::<Result<_>>()?;
    let npairs = functionals.len() * directions.len();
    let s2 = setup.sigma * setup.sigma;
    let lambda = setup.lambda;

    let per_sample: Vec<Vec<(f64, f64, f64, usize)>> = map_replicas(setup.n_samples, |i| {
        let phi = sampler.sample_with_key(StreamKey::new(setup.seed, Domain::Gff, i as u64, 0));
        let masses = builder.masses(0.0, phi.zero_mean_values());
        let m0 = neumaier_sum(masses.iter().copied());
        let grads: Vec<f64> = directions
            .iter()
            .map(|(_, h)| grad_inner(&phi, h).expect("same geometry"))
            .collect();
        let mh: Vec<f64> = smooth_dirs.iter().map(|hs| dot(&masses, hs)).collect();
        let mut out = Vec::with_capacity(npairs);
        for g in functionals {
            let k = g.observables.len();
            let mf: Vec<f64> = g
                .observables
                .iter()
                .map(|f| dot_field(&masses, f))
                .collect();
            let (a, b) = g.mass_window();
            let (lo, hi) = (0.5 * (a / m0).ln(), 0.5 * (b / m0).ln());
            // Components: J_q, J_0..J_k (d_i q * e^{2m}), J_y (q * e^{2m}).
            let dim = k + 3;
            let integrand = {
                let y = std::cell::RefCell::new(vec![0.0; k + 1]);
                move |m: f64, out: &mut [f64]| {
                    let mut y = y.borrow_mut();
                    let e = (2.0 * m).exp();
                    y[0] = e * m0;
                    for i in 0..k {
                        y[i + 1] = e * mf[i];
                    }
                    let w = (-(lambda / s2) * e * m0).exp();
                    let q = g.q(&y);
                    let grad = g.gradient(&y);
                    out[0] = q * w;
                    for i in 0..=k {
                        out[1 + i] = grad[i] * e * w;
                    }
                    out[k + 2] = q * e * w;
                }
            };
            let (j, jerr, nodes) = adaptive_simpson(&integrand, lo, hi, dim, setup.quad_tol);
            for d in 0..directions.len() {
                let lhs = grads[d] * j[0];
                // sum_i M0(f_i h_eps) J_i, with f_0 = 1.
                let mut dterm = mh[d] * j[1];
                let mut derr = mh[d].abs() * jerr[1];
                for i in 0..k {
                    let mfh = dot3(&masses, &g.observables[i], &smooth_dirs[d]);
                    dterm += mfh * j[2 + i];
                    derr += mfh.abs() * jerr[2 + i];
                }
                let rhs = s2 * dterm - lambda * mh[d] * j[k + 2];
                let err = grads[d].abs() * jerr[0] + s2 * derr + lambda * mh[d].abs() * jerr[k + 2];
                out.push((lhs, rhs, err, nodes));
            }
        }
        out
    });

    let mut reports = Vec::with_capacity(npairs);
    for (gi, g) in functionals.iter().enumerate() {
        for (d, (hname, _)) in directions.iter().enumerate() {
            let p = gi * directions.len() + d;
            let terms = SampleTerms {
                lhs: per_sample.iter().map(|s| s[p].0).collect(),
                rhs: per_sample.iter().map(|s| s[p].1).collect(),
                err: per_sample.iter().map(|s| s[p].2).collect(),
                nodes: per_sample.iter().map(|s| s[p].3).collect(),
            };
            reports.push(summarize(setup, &g.name, hname, &terms));
        }
    }
    Ok(reports)
}

fn summarize(setup: &IbpSetup, gname: &str, hname: &str, t: &SampleTerms) -> IbpReport {
    let diff: Vec<f64> = t.lhs.iter().zip(&t.rhs).map(|(a, b)| a - b).collect();
    let se_stat = std_error(&diff);
    let se_quad = mean(&t.err);
    let se = se_stat.max(se_quad).max(f64::MIN_POSITIVE);
    IbpReport {
        functional: gname.to_string(),
        direction: hname.to_string(),
        sigma: setup.sigma,
        lambda: setup.lambda,
        lhs: Estimate::of_mean(&t.lhs),
        rhs: Estimate::of_mean(&t.rhs),
        diff_stderr: se,
        z: mean(&diff) / se,
        n: diff.len(),
        nodes: t.nodes.iter().sum::<usize>() as f64 / t.nodes.len() as f64,
        seed: setup.seed,
    }
}

/// Single-pair convenience wrapper around [`ibp_catalog`].
pub fn ibp_residual(
    setup: &IbpSetup,
    g: &TestFunctional,
    h: &ScalarField,
    h_name: &str,
) -> Result<IbpReport> {
    Ok(ibp_catalog(
        setup,
        std::slice::from_ref(g),
        &[(h_name.to_string(), h.clone())],
    )?
    .pop()
    .expect("one report"))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    neumaier_sum(a.iter().zip(b).map(|(x, y)| x * y))
}

fn dot_field(masses: &[f64], f: &ScalarField) -> f64 {
    neumaier_sum(masses.iter().enumerate().map(|(i, w)| w * f.value(i)))
}

fn dot3(masses: &[f64], f: &ScalarField, h: &[f64]) -> f64 {
    neumaier_sum(
        masses
            .iter()
            .enumerate()
            .map(|(i, w)| w * f.value(i) * h[i]),
    )
}

/// The fixed reference catalog: three functionals and three directions.
pub fn reference_catalog(
    g: &Arc<TorusGeometry>,
) -> Result<(Vec<TestFunctional>, Vec<(String, ScalarField)>)> {
    use crate::srf::ObservableSpec;
    let f1 = ObservableSpec::Mode {
        a: 1,
        b: 0,
        phase: 0.0,
        offset: 1.0,
        amplitude: 0.5,
    }
    .materialize(g);
    let f2 = ObservableSpec::Bump {
        center: (0.5, 0.5),
        radius: 0.35,
        height: 1.0,
    }
    .materialize(g);
    let mass = Bump1d::new(0.1, 10.0)?;
    let functionals = vec![
        TestFunctional::new("G1", vec![], vec![(0, mass)])?,
        TestFunctional::new(
            "G2",
            vec![f1.clone()],
            vec![(0, mass), (1, Bump1d::new(0.0, 12.0)?)],
        )?,
        TestFunctional::new(
            "G3",
            vec![f1, f2],
            vec![
                (0, Bump1d::new(0.2, 8.0)?),
                (1, Bump1d::new(-1.0, 10.0)?),
                (2, Bump1d::new(-0.5, 3.0)?),
            ],
        )?,
    ];
    let directions = vec![
        ("const".to_string(), ScalarField::constant(g.clone(), 0.7)),
        (
            "mode".to_string(),
            ObservableSpec::Mode {
                a: 1,
                b: 1,
                phase: 0.3,
                offset: 0.0,
                amplitude: 1.0,
            }
            .materialize(g),
        ),
        (
            "bump".to_string(),
            ObservableSpec::Bump {
                center: (0.3, 0.6),
                radius: 0.25,
                height: 1.0,
            }
            .materialize(g),
        ),
    ];
    Ok((functionals, directions))
}

#[derive(Debug, Clone, Serialize)]
pub struct RegressionReport {
    pub observable: String,
    pub replicas: usize,
    pub windows: usize,
    /// Realized QV against `4 sigma^2 int A(f^2)`: ratio of sums (slope
    /// through the origin).
    pub qv_ratio: Estimate,
    /// Same with intercept, cluster-robust by replica.
    pub qv_fit: LinearFit,
    /// Window increments against the integrated drift, instrumented by the
    /// drift at the window start.
    pub drift_iv: Estimate,
    /// Plain least squares of increments on integrated drift.
    pub drift_fit: LinearFit,
}

#[derive(Debug, Clone, Serialize)]
pub struct CovariationReport {
    pub pair: (usize, usize),
    pub replicas: usize,
    pub windows: usize,
    /// `None` when the predicted covariation vanishes identically.
    pub ratio: Option<Estimate>,
    pub fit: Option<LinearFit>,
    /// Mean over replicas of the total realized covariation.
    pub realized: Estimate,
    /// Mean over replicas of the total predicted covariation.
    pub predicted: f64,
}

fn usable(records: &[TrajectoryRecord]) -> Vec<&TrajectoryRecord> {
    records
        .iter()
        .filter(|r| r.status == RunStatus::Completed && !r.windows.is_empty())
        .collect()
}

fn check_windows(recs: &[&TrajectoryRecord]) -> Result<usize> {
    let windows: usize = recs.iter().map(|r| r.windows.len()).sum();
    if recs.len() < 2 || windows < 3 {
        return Err(Error::InsufficientData(format!(
            "{} completed replicas with {windows} windows",
            recs.len()
        )));
    }
    Ok(windows)
}

/// Drift and QV identification for observable `j` of an ensemble.
pub fn qv_drift_regression(records: &[TrajectoryRecord], j: usize) -> Result<RegressionReport> {
    let recs = usable(records);
    let windows = check_windows(&recs)?;
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut cl = Vec::new();
    let mut dx = Vec::new();
    let mut dy = Vec::new();
    let mut num = Vec::new();
    let mut den = Vec::new();
    let mut zy = Vec::new();
    let mut zx = Vec::new();
    for (r, rec) in recs.iter().enumerate() {
        let (mut n, mut d, mut a, mut b) = (0.0, 0.0, 0.0, 0.0);
        for (w, win) in rec.windows.iter().enumerate() {
            x.push(win.qv_integral[j]);
            y.push(win.realized_qv[j]);
            cl.push(r);
            n += win.realized_qv[j];
            d += win.qv_integral[j];
            let inc = rec.values[j][w + 1] - rec.values[j][w];
            dx.push(win.drift_integral[j]);
            dy.push(inc);
            let z = win.start_drift[j] * (win.t1 - win.t0);
            a += z * inc;
            b += z * win.drift_integral[j];
        }
        num.push(n);
        den.push(d);
        zy.push(a);
        zx.push(b);
    }
    Ok(RegressionReport {
        observable: recs[0].observable_names[j].clone(),
        replicas: recs.len(),
        windows,
        qv_ratio: ratio_of_sums(&num, &den),
        qv_fit: cluster_ols(&x, &y, &cl),
        drift_iv: ratio_of_sums(&zy, &zx),
        drift_fit: cluster_ols(&dx, &dy, &cl),
    })
}

/// Realized covariation of observables `i`, `j` against
/// `4 sigma^2 int A(f_i f_j)`. With `i == j` this is the QV regression.
pub fn covariation_regression(
    records: &[TrajectoryRecord],
    i: usize,
    j: usize,
) -> Result<CovariationReport> {
    let recs = usable(records);
    let windows = check_windows(&recs)?;
    let pairs = pair_list(recs[0].observable_names.len());
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut cl = Vec::new();
    let mut num = Vec::new();
    let mut den = Vec::new();
    for (r, rec) in recs.iter().enumerate() {
        let (mut n, mut d) = (0.0, 0.0);
        for win in &rec.windows {
            let (c, p) = Window::covariation_of(win, &pairs, i, j);
            x.push(p);
            y.push(c);
            cl.push(r);
            n += c;
            d += p;
        }
        num.push(n);
        den.push(d);
    }
    let degenerate = den.iter().all(|d| *d == 0.0);
    Ok(CovariationReport {
        pair: (i, j),
        replicas: recs.len(),
        windows,
        ratio: (!degenerate).then(|| ratio_of_sums(&num, &den)),
        fit: (!degenerate).then(|| cluster_ols(&x, &y, &cl)),
        realized: Estimate::of_mean(&num),
        predicted: mean(&den),
    })
}

/// Null model: Euler paths of `dA = 2 sigma sqrt(A) dB - 2 lambda A dt`
/// recorded like an SRF trajectory with the single observable `f = 1`.
/// Conditional mean and variance of every step match the recorded drift
/// and QV integrand exactly, so the regressions must return slope 1.
pub fn feller_surrogate(
    sigma: f64,
    lambda: f64,
    a0: f64,
    dt: f64,
    steps_per_window: usize,
    windows: usize,
    replicas: usize,
    seed: u64,
) -> Result<Vec<TrajectoryRecord>> {
    if steps_per_window < crate::srf::MIN_WINDOW_STEPS {
        return Err(invalid(
            "steps_per_window",
            "fewer than 20 steps per window",
        ));
    }
    use rand::Rng;
    use rand_distr::StandardNormal;
    let four_s2 = 4.0 * sigma * sigma;
    Ok(map_replicas(replicas, |r| {
        let mut rng = StreamKey::new(seed, Domain::MassPath, r as u64, 0).rng();
        let mut a = a0;
        let mut t = 0.0;
        let mut rec = TrajectoryRecord {
            seed,
            replica: r as u64,
            sigma,
            lambda,
            observable_names: vec!["1".into()],
            pairs: vec![],
            times: vec![0.0],
            values: vec![vec![a]],
            drift: vec![vec![-2.0 * lambda * a]],
            windows: vec![],
            events: vec![],
            status: RunStatus::Completed,
        };
        for _ in 0..windows {
            let mut win = Window {
                t0: t,
                t1: t + dt * steps_per_window as f64,
                steps: 0,
                start_drift: vec![-2.0 * lambda * a],
                drift_integral: vec![0.0],
                realized_qv: vec![0.0],
                raw_qv: vec![0.0],
                qv_integral: vec![0.0],
                covariation: vec![],
                cov_integral: vec![],
            };
            for _ in 0..steps_per_window {
                let z: f64 = rng.sample(StandardNormal);
                let drift = -2.0 * lambda * a;
                let mart = 2.0 * sigma * (a * dt).sqrt() * z;
                win.drift_integral[0] += drift * dt;
                win.realized_qv[0] += mart * mart;
                win.raw_qv[0] += (drift * dt + mart).powi(2);
                win.qv_integral[0] += four_s2 * a * dt;
                win.steps += 1;
                a = (a + drift * dt + mart).max(0.0);
                t += dt;
            }
            rec.windows.push(win);
            rec.times.push(t);
            rec.values[0].push(a);
            rec.drift[0].push(-2.0 * lambda * a);
            if a == 0.0 {
                rec.status = RunStatus::Absorbed;
                break;
            }
        }
        rec
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmc::build_gmc;

    #[test]
    fn bump_derivatives_match_finite_differences() {
        let b = Bump1d::new(0.5, 3.0).unwrap();
        for &y in &[0.7, 1.2, 1.75, 2.4, 2.9] {
            let (v, d, dd) = b.eval(y);
            let h = 1e-5;
            let fd = (b.eval(y + h).0 - b.eval(y - h).0) / (2.0 * h);
            let fdd = (b.eval(y + h).1 - b.eval(y - h).1) / (2.0 * h);
            assert!((d - fd).abs() < 1e-7 * (1.0 + d.abs()), "{y}");
            assert!((dd - fdd).abs() < 1e-6 * (1.0 + dd.abs()), "{y}");
            assert!(v > 0.0);
        }
        assert_eq!(b.eval(0.5), (0.0, 0.0, 0.0));
        assert_eq!(b.eval(5.0), (0.0, 0.0, 0.0));
        assert!(Bump1d::new(2.0, 1.0).is_err());
    }

    #[test]
    fn support_box_contains_support() {
        let g = TorusGeometry::square(8).unwrap();
        let (fs, _) = reference_catalog(&g).unwrap();
        for f in &fs {
            let bx = f.support_box();
            for k in 0..2000 {
                let y: Vec<f64> = (0..f.arity())
                    .map(|i| -2.0 + 16.0 * (((k * 7919 + i * 104729) % 1000) as f64 / 1000.0))
                    .collect();
                let inside = y.iter().zip(&bx).all(|(v, (lo, hi))| v > lo && v < hi);
                if !inside {
                    assert_eq!(f.q(&y), 0.0);
                    assert!(f.gradient(&y).iter().all(|d| *d == 0.0));
                }
            }
        }
    }

    #[test]
    fn functional_needs_mass_support() {
        let g = TorusGeometry::square(8).unwrap();
        let f = ScalarField::constant(g, 1.0);
        assert!(
            TestFunctional::new("x", vec![f], vec![(1, Bump1d::new(0.0, 1.0).unwrap())]).is_err()
        );
    }

    #[test]
    fn hessian_is_symmetric_and_matches_gradient() {
        let g = TorusGeometry::square(8).unwrap();
        let (fs, _) = reference_catalog(&g).unwrap();
        let f = &fs[2];
        let y = [1.1, 1.4, 0.6];
        let h = f.hessian(&y);
        let eps = 1e-6;
        for i in 0..3 {
            let mut yp = y;
            let mut ym = y;
            yp[i] += eps;
            ym[i] -= eps;
            let gp = f.gradient(&yp);
            let gm = f.gradient(&ym);
            for j in 0..3 {
                assert!((h[i][j] - h[j][i]).abs() < 1e-12);
                let fd = (gp[j] - gm[j]) / (2.0 * eps);
                assert!((h[j][i] - fd).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn frechet_constant_direction() {
        let g = TorusGeometry::square(16).unwrap();
        let s = GffSampler::new(g.clone(), 1.0, 0).unwrap();
        let m = build_gmc(&s.sample(0), 1.0, &Mollifier::heat(0.125)).unwrap();
        let b = Bump1d::new(0.1, 10.0).unwrap();
        let f = TestFunctional::new("mass", vec![], vec![(0, b)]).unwrap();
        let c = 0.3;
        let h = ScalarField::constant(g.clone(), c);
        let mass = m.total_mass();
        let expected = 2.0 * c * b.eval(mass).1 * mass;
        let got = frechet(&f, &h, &m).unwrap();
        assert!((got - expected).abs() < 1e-12 * expected.abs());

        let outside =
            TestFunctional::new("far", vec![], vec![(0, Bump1d::new(50.0, 60.0).unwrap())])
                .unwrap();
        assert_eq!(frechet(&outside, &h, &m).unwrap(), 0.0);
    }

    #[test]
    fn frechet_is_linear_and_leibniz() {
        let g = TorusGeometry::square(16).unwrap();
        let s = GffSampler::new(g.clone(), 0.8, 1).unwrap();
        let m = build_gmc(&s.sample(0), 0.8, &Mollifier::heat(0.125)).unwrap();
        let (fs, dirs) = reference_catalog(&g).unwrap();
        let (h1, h2) = (&dirs[1].1, &dirs[2].1);
        for f in &fs {
            let a = frechet(f, h1, &m).unwrap();
            let b = frechet(f, h2, &m).unwrap();
            let ab = frechet(f, &h1.scaled(2.0).axpy(-3.0, h2).unwrap(), &m).unwrap();
            assert!((ab - (2.0 * a - 3.0 * b)).abs() < 1e-12 * (a.abs() + b.abs() + 1e-300));
        }
        let p = fs[1].product(&fs[2]);
        let lhs = frechet(&p, h2, &m).unwrap();
        let rhs = frechet(&fs[1], h2, &m).unwrap() * fs[2].evaluate(&m).unwrap()
            + fs[1].evaluate(&m).unwrap() * frechet(&fs[2], h2, &m).unwrap();
        assert!((lhs - rhs).abs() <= 1e-14 * lhs.abs().max(rhs.abs()));
    }

    #[test]
    fn simpson_integrates_polynomials_and_bumps() {
        let f = |x: f64, out: &mut [f64]| {
            out[0] = x * x * x;
            out[1] = Bump1d { lo: 0.0, hi: 1.0 }.eval(x).0;
        };
        let (v, _, n) = adaptive_simpson(&f, 0.0, 1.0, 2, 1e-12);
        assert!((v[0] - 0.25).abs() < 1e-14);
        // int_{-1}^{1} exp(1 - 1/(1 - z^2)) dz / 2 = 0.4439938161680794 / 2 * e
        let exact = 0.443_993_816_168_079_4 * std::f64::consts::E / 2.0;
        assert!((v[1] - exact).abs() < 1e-10, "{} vs {exact}", v[1]);
        assert!(n > 5);
    }

    #[test]
    fn degenerate_window_rejected() {
        let g = TorusGeometry::square(8).unwrap();
        let setup = IbpSetup {
            geometry: g.clone(),
            sigma: 0.5,
            lambda: 0.5,
            mollifier: Mollifier::heat(0.25),
            n_samples: 10,
            seed: 0,
            quad_tol: 1e-10,
        };
        let f =
            TestFunctional::new("neg", vec![], vec![(0, Bump1d { lo: -1.0, hi: -0.5 })]).unwrap();
        let h = ScalarField::constant(g, 1.0);
        assert!(ibp_residual(&setup, &f, &h, "c").is_err());
    }

    #[test]
    fn constant_direction_rhs_cancels_per_sample() {
        let g = TorusGeometry::square(16).unwrap();
        let setup = IbpSetup {
            geometry: g.clone(),
            sigma: 1.5,
            lambda: 1.0,
            mollifier: Mollifier::heat(0.125),
            n_samples: 50,
            seed: 3,
            quad_tol: 1e-11,
        };
        let (fs, dirs) = reference_catalog(&g).unwrap();
        let reps = ibp_catalog(&setup, &fs, &dirs[..1]).unwrap();
        for r in reps {
            assert_eq!(r.lhs.value, 0.0);
            assert!(r.rhs.value.abs() < 1e-8, "{r:?}");
            assert!(r.z.abs() <= 3.0, "{r:?}");
        }
    }

    #[test]
    fn feller_surrogate_shape() {
        let recs = feller_surrogate(0.5, 1.0, 1.0, 1e-3, 20, 5, 4, 0).unwrap();
        assert_eq!(recs.len(), 4);
        for r in &recs {
            assert_eq!(r.values[0].len(), r.windows.len() + 1);
        }
        assert!(feller_surrogate(0.5, 1.0, 1.0, 1e-3, 10, 5, 4, 0).is_err());
    }

    #[test]
    fn covariation_with_itself_is_the_qv_report() {
        let recs = feller_surrogate(0.5, 1.0, 1.0, 1e-3, 20, 10, 20, 1).unwrap();
        let q = qv_drift_regression(&recs, 0).unwrap();
        let c = covariation_regression(&recs, 0, 0).unwrap();
        assert_eq!(c.ratio.unwrap(), q.qv_ratio);
        assert_eq!(c.fit.unwrap().slope, q.qv_fit.slope);
    }

    #[test]
    fn regression_needs_windows() {
        let recs = feller_surrogate(0.5, 1.0, 1.0, 1e-3, 20, 1, 1, 1).unwrap();
        assert!(matches!(
            qv_drift_regression(&recs, 0),
            Err(Error::InsufficientData(_))
        ));
    }
}
