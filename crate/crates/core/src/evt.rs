//! Peaks-over-threshold tail modelling with the generalized Pareto
//! distribution.
//!
//! The MLE uses Grimshaw's reduction: with θ = ξ/σ the score equations give
//! ξ(θ) = mean(ln(1+θz)) in closed form, so the log-likelihood becomes a
//! one-dimensional profile in θ. The profile is scanned on a grid,
//! bracketed with golden-section search and polished with Newton steps.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Largest admissible shape; keeps both conditional moments finite.
pub const XI_MAX: f64 = 0.5 - 1e-3;
/// Smallest admissible shape; below −1 the likelihood is unbounded.
pub const XI_MIN: f64 = -1.0;
/// Minimum exceedance count for a fit.
pub const DEFAULT_N_MIN: usize = 50;
/// Below this |ξ| the exponential limit is used.
const XI_EXP_LIMIT: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpdFit {
    pub xi: f64,
    pub sigma: f64,
    pub threshold: f64,
    pub n_exceed: usize,
    pub n_total: usize,
    pub log_likelihood: f64,
    /// The optimum sits on the edge of the admissible shape range, or the
    /// sample was degenerate.
    pub boundary: bool,
}

impl GpdFit {
    /// A fit carrying only parameters, e.g. a prior.
    pub fn from_params(xi: f64, sigma: f64) -> Self {
        Self {
            xi,
            sigma,
            threshold: 0.0,
            n_exceed: 0,
            n_total: 0,
            log_likelihood: f64::NAN,
            boundary: false,
        }
    }

    pub fn cdf(&self, z: f64) -> f64 {
        gpd_cdf(z, self.xi, self.sigma)
    }

    pub fn sf(&self, z: f64) -> f64 {
        1.0 - self.cdf(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailDescriptor {
    pub p_exc: f64,
    pub m1: f64,
    pub m2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotSample {
    pub exceedances: Vec<f64>,
    pub p_exc: f64,
    pub n_total: usize,
}

/// Strictly positive excesses over `q0`, in trace order.
pub fn extract_pot(trace: &[f64], q0: f64) -> Result<PotSample> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let exceedances: Vec<f64> = trace.iter().filter(|&&q| q > q0).map(|&q| q - q0).collect();
    Ok(PotSample {
        p_exc: exceedances.len() as f64 / trace.len() as f64,
        n_total: trace.len(),
        exceedances,
    })
}

pub fn gpd_cdf(z: f64, xi: f64, sigma: f64) -> f64 {
    if z <= 0.0 {
        return 0.0;
    }
    if xi.abs() < XI_EXP_LIMIT {
        return -(-z / sigma).exp_m1();
    }
    let t = 1.0 + xi * z / sigma;
    if t <= 0.0 {
        // Beyond the upper endpoint −σ/ξ of a bounded tail.
        return 1.0;
    }
    -(-(t.ln()) / xi).exp_m1()
}

/// Inverse CDF, for sampling.
pub fn gpd_quantile(u: f64, xi: f64, sigma: f64) -> f64 {
    if xi.abs() < XI_EXP_LIMIT {
        -sigma * (-u).ln_1p()
    } else {
        sigma / xi * ((-xi * (-u).ln_1p()).exp_m1())
    }
}

pub fn gpd_log_likelihood(samples: &[f64], xi: f64, sigma: f64) -> f64 {
    if !(sigma > 0.0) {
        return f64::NEG_INFINITY;
    }
    let n = samples.len() as f64;
    if xi.abs() < XI_EXP_LIMIT {
        return -n * sigma.ln() - samples.iter().sum::<f64>() / sigma;
    }
    let mut acc = 0.0;
    for &z in samples {
        let t = xi * z / sigma;
        if t <= -1.0 {
            return f64::NEG_INFINITY;
        }
        acc += t.ln_1p();
    }
    -n * sigma.ln() - (1.0 + 1.0 / xi) * acc
}

/// Conditional moments (E[Z | Z>0], E[Z² | Z>0]).
pub fn gpd_moments(xi: f64, sigma: f64) -> Result<(f64, f64)> {
    if !(xi < 0.5) {
        return Err(Error::MomentUndefined(xi));
    }
    Ok((
        sigma / (1.0 - xi),
        2.0 * sigma * sigma / (1.0 - 3.0 * xi + 2.0 * xi * xi),
    ))
}

/// Unconditional excess moments from the exceedance frequency and a fit.
pub fn tail_descriptor(p_exc: f64, fit: &GpdFit) -> Result<TailDescriptor> {
    let (c1, c2) = gpd_moments(fit.xi, fit.sigma)?;
    Ok(TailDescriptor {
        p_exc,
        m1: p_exc * c1,
        m2: p_exc * c2,
    })
}

/// ln(1+u)/u, continuous at 0.
fn log1p_ratio(u: f64) -> f64 {
    if u.abs() < 1e-8 {
        1.0 - u / 2.0
    } else {
        u.ln_1p() / u
    }
}

struct Profile<'a> {
    samples: &'a [f64],
}

impl Profile<'_> {
    /// (ξ(θ), σ(θ)).
    fn params(&self, theta: f64) -> (f64, f64) {
        let n = self.samples.len() as f64;
        let mut xi = 0.0;
        let mut sigma = 0.0;
        for &z in self.samples {
            let u = theta * z;
            let r = log1p_ratio(u);
            xi += u * r;
            sigma += z * r;
        }
        (xi / n, sigma / n)
    }

    fn loglik(&self, theta: f64) -> f64 {
        let (xi, sigma) = self.params(theta);
        let n = self.samples.len() as f64;
        -n * sigma.ln() - n * (1.0 + xi)
    }

    fn xi(&self, theta: f64) -> f64 {
        self.params(theta).0
    }
}

/// θ with ξ(θ) = target, by bisection on a bracket where ξ is increasing.
fn solve_theta(profile: &Profile<'_>, target: f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if profile.xi(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo).abs() <= 1e-15 * hi.abs().max(lo.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    if fc > fd {
        c
    } else {
        d
    }
}

fn degenerate_fit(samples: &[f64], n_total: usize, threshold: f64) -> GpdFit {
    // Method of moments, ξ = ½(1 − m²/s²), clamped to the admissible range.
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / n;
    let xi = if var > 0.0 {
        (0.5 * (1.0 - mean * mean / var)).clamp(XI_MIN, 0.0)
    } else {
        XI_MIN
    };
    let sigma = mean * (1.0 - xi);
    GpdFit {
        xi,
        sigma,
        threshold,
        n_exceed: samples.len(),
        n_total,
        log_likelihood: gpd_log_likelihood(samples, xi, sigma),
        boundary: true,
    }
}

const GRID_POINTS: usize = 200;
const NEWTON_STEPS: usize = 20;

/// Maximum-likelihood GPD fit of positive excesses.
pub fn fit_gpd_mle(samples: &[f64], n_min: usize) -> Result<GpdFit> {
    fit_gpd_mle_with(samples, n_min, 0.0, samples.len())
}

/// As [`fit_gpd_mle`], recording the threshold and trace length the
/// excesses came from.
pub fn fit_gpd_mle_with(samples: &[f64], n_min: usize, threshold: f64, n_total: usize) -> Result<GpdFit> {
    if samples.len() < n_min.max(2) {
        return Err(Error::InsufficientExceedances {
            found: samples.len(),
            required: n_min.max(2),
        });
    }
    let z_max = samples.iter().cloned().fold(f64::MIN, f64::max);
    let z_min = samples.iter().cloned().fold(f64::MAX, f64::min);
    if !(z_max > 0.0) || z_max - z_min <= 1e-12 * z_max {
        return Ok(degenerate_fit(samples, n_total, threshold));
    }
    let profile = Profile { samples };

    // Admissible θ range from the shape bounds.
    let theta_floor = -1.0 / z_max;
    let theta_lo = solve_theta(&profile, XI_MIN, theta_floor * (1.0 - 1e-12), 0.0);
    let mut hi = 1.0 / z_max;
    while profile.xi(hi) < XI_MAX {
        hi *= 2.0;
    }
    let theta_hi = solve_theta(&profile, XI_MAX, 0.0, hi);

    // Grid in ξ-space is better conditioned than in θ near the floor.
    let mut thetas = Vec::with_capacity(GRID_POINTS + 1);
    for i in 0..=GRID_POINTS {
        let xi_target = XI_MIN + (XI_MAX - XI_MIN) * i as f64 / GRID_POINTS as f64;
        let t = if i == 0 {
            theta_lo
        } else if i == GRID_POINTS {
            theta_hi
        } else if xi_target < 0.0 {
            solve_theta(&profile, xi_target, theta_lo, 0.0)
        } else {
            solve_theta(&profile, xi_target, 0.0, theta_hi)
        };
        thetas.push(t);
    }
    let values: Vec<f64> = thetas.iter().map(|&t| profile.loglik(t)).collect();
    let best = values
        .iter()
        .enumerate()
        .fold(0, |b, (i, &v)| if v > values[b] { i } else { b });
    let a = thetas[best.saturating_sub(1)];
    let b = thetas[(best + 1).min(GRID_POINTS)];
    let mut theta = golden_max(|t| profile.loglik(t), a, b, 80);
    let mut ll = profile.loglik(theta);

    // Newton polish on the profile with central differences.
    for _ in 0..NEWTON_STEPS {
        let h = 1e-4 * (b - a).abs().max(1e-12);
        let (fp, fm) = (profile.loglik(theta + h), profile.loglik(theta - h));
        let d1 = (fp - fm) / (2.0 * h);
        let d2 = (fp - 2.0 * ll + fm) / (h * h);
        if !(d2 < 0.0) {
            break;
        }
        let next = (theta - d1 / d2).clamp(a, b);
        let next_ll = profile.loglik(next);
        if !(next_ll > ll) {
            break;
        }
        theta = next;
        ll = next_ll;
    }

    let (xi, sigma) = profile.params(theta);
    let boundary = best == 0 || best == GRID_POINTS || xi >= XI_MAX - 1e-6 || xi <= XI_MIN + 1e-6;
    Ok(GpdFit {
        xi,
        sigma,
        threshold,
        n_exceed: samples.len(),
        n_total,
        log_likelihood: gpd_log_likelihood(samples, xi, sigma),
        boundary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailComparison {
    pub fit: GpdFit,
    pub gauss_mean: f64,
    pub gauss_sd: f64,
    pub gpd_sf_mse: f64,
    pub gauss_sf_mse: f64,
    /// Number of points above the 75th percentile used for the errors.
    pub n_tail_points: usize,
}

fn normal_sf(x: f64, mean: f64, sd: f64) -> f64 {
    if sd <= 0.0 {
        return if x < mean { 1.0 } else { 0.0 };
    }
    0.5 * erfc((x - mean) / (sd * std::f64::consts::SQRT_2))
}

/// Compares GPD and Gaussian fits of the excesses by the mean squared error
/// of their survival functions against the empirical one, over sample points
/// at or above the 75th percentile.
pub fn gaussian_tail_comparison(samples: &[f64], n_min: usize) -> Result<TailComparison> {
    let fit = fit_gpd_mle(samples, n_min)?;
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / (n as f64 - 1.0);
    let sd = var.sqrt();

    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let start = (0.75 * n as f64).floor() as usize;
    let mut gpd_err = 0.0;
    let mut gauss_err = 0.0;
    let mut count = 0usize;
    let mut i = start;
    while i < n {
        let x = sorted[i];
        // Skip ties so the empirical SF is evaluated once per distinct value.
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == x {
            j += 1;
        }
        let emp = (n - 1 - j) as f64 / n as f64;
        gpd_err += (fit.sf(x) - emp).powi(2);
        gauss_err += (normal_sf(x, mean, sd) - emp).powi(2);
        count += 1;
        i = j + 1;
    }
    let count_f = count.max(1) as f64;
    Ok(TailComparison {
        fit,
        gauss_mean: mean,
        gauss_sd: sd,
        gpd_sf_mse: gpd_err / count_f,
        gauss_sf_mse: gauss_err / count_f,
        n_tail_points: count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn gpd_samples(n: usize, xi: f64, sigma: f64, seed: u64) -> Vec<f64> {
        let mut r = rng::substream(seed, rng::INSTANCES);
        (0..n).map(|_| gpd_quantile(r.random::<f64>(), xi, sigma)).collect()
    }

    #[test]
    fn pot_extraction() {
        let pot = extract_pot(&[1.0, 2.0, 1.6], 1.5).unwrap();
        assert_eq!(pot.exceedances.len(), 2);
        assert!((pot.exceedances[0] - 0.5).abs() < 1e-15);
        assert!((pot.exceedances[1] - 0.1).abs() < 1e-12);
        assert!((pot.p_exc - 2.0 / 3.0).abs() < 1e-15);

        let none = extract_pot(&[0.2, 1.0], 1.5).unwrap();
        assert!(none.exceedances.is_empty());
        assert_eq!(none.p_exc, 0.0);
        assert!(extract_pot(&[1.5], 1.5).unwrap().exceedances.is_empty());
        assert!(matches!(extract_pot(&[], 1.5), Err(Error::EmptyTrace)));
    }

    #[test]
    fn cdf_examples() {
        assert_eq!(gpd_cdf(0.0, 0.3, 1.0), 0.0);
        assert!((gpd_cdf(2.0, 0.0, 2.0) - (1.0 - (-1f64).exp())).abs() < 1e-15);
        assert!((gpd_cdf(2.0, 0.5, 1.0) - 0.75).abs() < 1e-15);
        // Past the endpoint σ/|ξ| of a bounded tail.
        assert_eq!(gpd_cdf(3.0, -0.5, 1.0), 1.0);
    }

    #[test]
    fn cdf_is_continuous_at_exponential_limit() {
        for z in [0.01, 0.5, 1.0, 3.0, 10.0] {
            let lhs = gpd_cdf(z, 1e-9, 1.3);
            let rhs = 1.0 - (-z / 1.3f64).exp();
            assert!((lhs - rhs).abs() <= 1e-7);
        }
    }

    #[test]
    fn moment_examples() {
        assert_eq!(gpd_moments(0.0, 1.0).unwrap(), (1.0, 2.0));
        let (m1, m2) = gpd_moments(0.25, 2.0).unwrap();
        assert!((m1 - 8.0 / 3.0).abs() < 1e-12);
        assert!((m2 - 64.0 / 3.0).abs() < 1e-12);
        assert!(gpd_moments(0.5 - 1e-9, 1.0).unwrap().1 > 1e8);
        assert!(matches!(gpd_moments(0.5, 1.0), Err(Error::MomentUndefined(_))));
    }

    #[test]
    fn descriptor_examples() {
        let fit = GpdFit::from_params(0.0, 2.0);
        let d = tail_descriptor(0.0, &fit).unwrap();
        assert_eq!((d.m1, d.m2), (0.0, 0.0));
        let d = tail_descriptor(0.1, &fit).unwrap();
        assert!((d.m1 - 0.2).abs() < 1e-15 && (d.m2 - 0.8).abs() < 1e-15);
        let d = tail_descriptor(1.0, &fit).unwrap();
        assert_eq!((d.m1, d.m2), gpd_moments(0.0, 2.0).unwrap());
    }

    #[test]
    fn mle_recovers_parameters() {
        let s = gpd_samples(5000, 0.2, 1.0, 42);
        let fit = fit_gpd_mle(&s, DEFAULT_N_MIN).unwrap();
        assert!((0.15..=0.25).contains(&fit.xi), "{fit:?}");
        assert!((0.95..=1.05).contains(&fit.sigma), "{fit:?}");
        assert!(!fit.boundary);

        let s = gpd_samples(10_000, 0.0, 1.0, 43);
        let fit = fit_gpd_mle(&s, DEFAULT_N_MIN).unwrap();
        assert!(fit.xi.abs() <= 0.05, "{fit:?}");
    }

    #[test]
    fn mle_maximizes_likelihood_locally() {
        let s = gpd_samples(800, 0.1, 0.7, 3);
        let fit = fit_gpd_mle(&s, DEFAULT_N_MIN).unwrap();
        for (dx, ds) in [(0.01, 0.0), (-0.01, 0.0), (0.0, 0.01), (0.0, -0.01)] {
            assert!(gpd_log_likelihood(&s, fit.xi + dx, fit.sigma + ds) <= fit.log_likelihood + 1e-9);
        }
    }

    #[test]
    fn degenerate_samples_fall_back() {
        let s = vec![0.7; 60];
        let fit = fit_gpd_mle(&s, DEFAULT_N_MIN).unwrap();
        assert!(fit.boundary && fit.xi <= 0.0);
        assert!((fit.sigma / (1.0 - fit.xi) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn too_few_exceedances() {
        let s = gpd_samples(10, 0.1, 1.0, 1);
        assert!(matches!(
            fit_gpd_mle(&s, DEFAULT_N_MIN),
            Err(Error::InsufficientExceedances { found: 10, required: 50 })
        ));
        assert!(gaussian_tail_comparison(&s, DEFAULT_N_MIN).is_err());
    }

    #[test]
    fn gpd_beats_gaussian_on_heavy_tail() {
        let s = gpd_samples(3000, 0.3, 1.0, 9);
        let cmp = gaussian_tail_comparison(&s, DEFAULT_N_MIN).unwrap();
        assert!(cmp.gpd_sf_mse < cmp.gauss_sf_mse, "{cmp:?}");
    }

    #[test]
    fn half_normal_comparison_runs() {
        let mut r = rng::substream(4, rng::INSTANCES);
        let s: Vec<f64> = (0..2000)
            .map(|_| r.sample::<f64, _>(rand_distr::StandardNormal).abs())
            .collect();
        let cmp = gaussian_tail_comparison(&s, DEFAULT_N_MIN).unwrap();
        assert!(cmp.gpd_sf_mse < 0.01 && cmp.gauss_sf_mse < 0.05, "{cmp:?}");
    }

    proptest! {
        #[test]
        fn cdf_is_a_distribution(xi in -0.4..0.45f64, sigma in 0.1..5.0f64, z in 0.0..50.0f64, dz in 0.0..5.0f64) {
            let a = gpd_cdf(z, xi, sigma);
            let b = gpd_cdf(z + dz, xi, sigma);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(b >= a - 1e-15);
        }

        #[test]
        fn quantile_inverts_cdf(xi in -0.4..0.45f64, sigma in 0.1..5.0f64, u in 0.001..0.999f64) {
            let z = gpd_quantile(u, xi, sigma);
            prop_assert!((gpd_cdf(z, xi, sigma) - u).abs() < 1e-10);
        }
    }
}
