//! Small statistics toolkit used by the verification routines: compensated
//! sums, standard errors, Kolmogorov–Smirnov distances, cluster-robust
//! regression and bootstrap intervals.

use puruspe::erfc;
use rand::Rng;

use crate::rng::{Domain, StreamKey};

/// Neumaier-compensated sum.
pub fn neumaier_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for x in it {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    neumaier_sum(xs.iter().copied()) / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    neumaier_sum(xs.iter().map(|x| (x - m) * (x - m))) / (n as f64 - 1.0)
}

/// Standard error of the mean.
pub fn std_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn of_mean(xs: &[f64]) -> Self {
        Self {
            value: mean(xs),
            stderr: std_error(xs),
        }
    }

    /// `|value - target| <= k * stderr`
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.stderr
    }

    pub fn ci95(&self) -> (f64, f64) {
        (
            self.value - Z_975 * self.stderr,
            self.value + Z_975 * self.stderr,
        )
    }
}

/// 97.5% standard normal quantile.
pub const Z_975: f64 = 1.959_963_984_540_054;

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Asymptotic Kolmogorov survival function `P(K > t)`.
pub fn kolmogorov_survival(t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    if t < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * t * t).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// One-sample KS distance between the empirical distribution of `samples`
/// and the continuous CDF `cdf`.
pub fn ks_distance<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

/// KS distance on `[0, horizon]` for right-censored event times: `None`
/// means the event did not occur before `horizon`. The empirical CDF counts
/// events among all paths, so censoring enters only through the horizon.
pub fn ks_distance_censored<F: Fn(f64) -> f64>(times: &[Option<f64>], horizon: f64, cdf: F) -> f64 {
    let n = times.len() as f64;
    let mut hits: Vec<f64> = times
        .iter()
        .filter_map(|t| *t)
        .filter(|&t| t <= horizon)
        .collect();
    hits.sort_by(f64::total_cmp);
    let mut d = 0.0f64;
    for (i, &x) in hits.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d.max((cdf(horizon) - hits.len() as f64 / n).abs())
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct TwoSampleKs {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample Kolmogorov–Smirnov test with the asymptotic p-value.
pub fn ks_two_sample(x: &[f64], y: &[f64]) -> TwoSampleKs {
    let mut a = x.to_vec();
    let mut b = y.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < n && j < m {
        let v = a[i].min(b[j]);
        while i < n && a[i] <= v {
            i += 1;
        }
        while j < m && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let t = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    TwoSampleKs {
        statistic: d,
        p_value: kolmogorov_survival(t),
    }
}

/// Least-squares fit `y = intercept + slope * x` with standard errors that
/// are robust to arbitrary correlation inside each cluster (replica).
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LinearFit {
    pub slope: Estimate,
    pub intercept: Estimate,
    pub n: usize,
    pub clusters: usize,
}

pub fn cluster_ols(x: &[f64], y: &[f64], cluster: &[usize]) -> LinearFit {
    assert_eq!(x.len(), y.len());
    assert_eq!(x.len(), cluster.len());
    let n = x.len();
    let mx = mean(x);
    let my = mean(y);
    let sxx = neumaier_sum(x.iter().map(|v| (v - mx) * (v - mx)));
    let sxy = neumaier_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let slope = sxy / sxx;
    let intercept = my - slope * mx;

    // Sandwich estimator on the design (1, x - mx), which is orthogonal.
    let n_clusters = cluster.iter().copied().max().map_or(0, |m| m + 1);
    let mut g0 = vec![0.0; n_clusters];
    let mut g1 = vec![0.0; n_clusters];
    for i in 0..n {
        let r = y[i] - intercept - slope * x[i];
        g0[cluster[i]] += r;
        g1[cluster[i]] += r * (x[i] - mx);
    }
    let used = {
        let mut seen = vec![false; n_clusters];
        cluster.iter().for_each(|&c| seen[c] = true);
        seen.iter().filter(|&&s| s).count()
    };
    let adj = if used > 1 {
        used as f64 / (used as f64 - 1.0)
    } else {
        1.0
    };
    let v_slope = adj * neumaier_sum(g1.iter().map(|g| g * g)) / (sxx * sxx);
    let v_mean = adj * neumaier_sum(g0.iter().map(|g| g * g)) / (n as f64 * n as f64);
    let v_cross = adj * neumaier_sum(g0.iter().zip(&g1).map(|(a, b)| a * b)) / (n as f64 * sxx);
    let v_int = v_mean + mx * mx * v_slope - 2.0 * mx * v_cross;
    LinearFit {
        slope: Estimate {
            value: slope,
            stderr: v_slope.max(0.0).sqrt(),
        },
        intercept: Estimate {
            value: intercept,
            stderr: v_int.max(0.0).sqrt(),
        },
        n,
        clusters: used,
    }
}

/// Ratio of cluster totals `sum(num) / sum(den)` with a delta-method
/// standard error computed over independent clusters.
pub fn ratio_of_sums(num: &[f64], den: &[f64]) -> Estimate {
    let k = num.len() as f64;
    let r = neumaier_sum(num.iter().copied()) / neumaier_sum(den.iter().copied());
    let mden = mean(den);
    let resid: Vec<f64> = num.iter().zip(den).map(|(a, b)| a - r * b).collect();
    let v = variance(&resid) / (k * mden * mden);
    Estimate {
        value: r,
        stderr: v.max(0.0).sqrt(),
    }
}

/// Percentile bootstrap interval for `stat` over resamples of `xs`.
pub fn bootstrap_ci<F: Fn(&[f64]) -> f64>(
    xs: &[f64],
    stat: F,
    resamples: usize,
    level: f64,
    seed: u64,
) -> (f64, f64) {
    let mut rng = StreamKey::new(seed, Domain::Bootstrap, 0, 0).rng();
    let n = xs.len();
    let mut buf = vec![0.0; n];
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            for b in buf.iter_mut() {
                *b = xs[rng.random_range(0..n)];
            }
            stat(&buf)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let lo = ((1.0 - level) / 2.0 * resamples as f64).floor() as usize;
    let hi = (((1.0 + level) / 2.0 * resamples as f64).ceil() as usize).min(resamples - 1);
    (stats[lo], stats[hi])
}

/// Pearson correlation.
pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let mx = mean(x);
    let my = mean(y);
    let sxy = neumaier_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let sxx = neumaier_sum(x.iter().map(|a| (a - mx) * (a - mx)));
    let syy = neumaier_sum(y.iter().map(|b| (b - my) * (b - my)));
    sxy / (sxx * syy).sqrt()
}

/// Least-squares slope of `y` on `x` (with intercept).
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let mx = mean(x);
    let my = mean(y);
    let sxy = neumaier_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let sxx = neumaier_sum(x.iter().map(|a| (a - mx) * (a - mx)));
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_cancellation() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(neumaier_sum(xs), 2.0);
    }

    #[test]
    fn normal_cdf_reference_points() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-14);
        assert!((normal_cdf(1.959_963_984_540_054) - 0.975).abs() < 1e-12);
        assert!((normal_cdf(-1.0) - 0.158_655_253_931_457).abs() < 1e-12);
    }

    #[test]
    fn kolmogorov_tail_at_standard_critical_values() {
        assert!((kolmogorov_survival(1.358) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_survival(1.628) - 0.01).abs() < 1e-3);
    }

    #[test]
    fn ks_distance_of_perfect_quantiles_is_half_bin() {
        let n = 100;
        let xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let d = ks_distance(&xs, |x| x.clamp(0.0, 1.0));
        assert!((d - 0.005).abs() < 1e-12);
    }

    #[test]
    fn two_sample_ks_identical_samples() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let r = ks_two_sample(&xs, &xs);
        assert_eq!(r.statistic, 0.0);
        assert!(r.p_value > 0.99);
    }

    #[test]
    fn cluster_ols_recovers_exact_line() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 + 2.0 * v).collect();
        let c: Vec<usize> = (0..20).map(|i| i / 4).collect();
        let fit = cluster_ols(&x, &y, &c);
        assert!((fit.slope.value - 2.0).abs() < 1e-12);
        assert!((fit.intercept.value - 3.0).abs() < 1e-12);
        assert!(fit.slope.stderr < 1e-10);
    }
}
