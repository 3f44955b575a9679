//! Ground-truth machinery: exact denoising posteriors for Gaussian-mixture
//! data laws, plus the grid and Monte-Carlo oracles the test suites check
//! analytic identities against.

use rand::Rng;

use crate::error::{GmError, Result};
use crate::gm::{CanonicalGaussian, HeteroGaussianMixture, IsoGaussianMixture};
use crate::schedule::LinearSchedule;

/// A finite Gaussian mixture designated as the true data law p(x0).
#[derive(Debug, Clone)]
pub struct GmDataDistribution {
    gm: HeteroGaussianMixture,
}

impl GmDataDistribution {
    pub fn new(gm: HeteroGaussianMixture) -> Self {
        Self { gm }
    }

    pub fn from_iso(gm: &IsoGaussianMixture) -> Self {
        Self { gm: gm.into() }
    }

    pub fn gm(&self) -> &HeteroGaussianMixture {
        &self.gm
    }

    pub fn dim(&self) -> usize {
        self.gm.dim()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.gm.sample(rng)
    }

    /// Exact Bayes posterior p(x0 | x_t) under the linear schedule: the data
    /// mixture conflated with the likelihood N(x_t; alpha_t x0, sigma_t^2 I)
    /// viewed canonically in x0.
    pub fn posterior(&self, x_t: &[f64], t: f64) -> Result<HeteroGaussianMixture> {
        self.gm.conflate_canonical(&likelihood_factor(x_t, t)?)
    }

    /// Marginal p(x_t) of the forward-diffused data law (itself a mixture).
    pub fn marginal_at(&self, t: f64) -> HeteroGaussianMixture {
        let s = LinearSchedule;
        let zero = vec![0.0; self.dim()];
        self.gm
            .convolve(s.alpha(t), &zero, s.sigma(t).powi(2))
            .expect("marginal convolve cannot fail")
    }
}

/// The forward likelihood N(x_t; alpha_t x0, sigma_t^2 I) as a canonical
/// factor in x0: precision alpha_t^2 / sigma_t^2, precision-mean
/// alpha_t x_t / sigma_t^2. Valid for any t in (0, 1], including t = 1
/// where the precision degenerates to zero.
pub fn likelihood_factor(x_t: &[f64], t: f64) -> Result<CanonicalGaussian> {
    let s = LinearSchedule;
    let sigma2 = s.sigma(t).powi(2);
    if sigma2 == 0.0 {
        return Err(GmError::DegenerateTime { t, context: "posterior at sigma_t = 0" });
    }
    let a = s.alpha(t);
    CanonicalGaussian::new(a * a / sigma2, x_t.iter().map(|&x| a * x / sigma2).collect())
}

/// Shared-std data laws stay shared-std after conditioning, which is what
/// the solver-exactness tests rely on.
pub fn posterior_iso(data: &IsoGaussianMixture, x_t: &[f64], t: f64) -> Result<IsoGaussianMixture> {
    data.conflate_canonical(&likelihood_factor(x_t, t)?)
}

/// A density discretized on a uniform 1D grid (midpoint rule), normalized to
/// unit mass.
#[derive(Debug, Clone)]
pub struct GridPdf {
    pub lo: f64,
    pub hi: f64,
    pub values: Vec<f64>,
}

impl GridPdf {
    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.values.len() as f64
    }

    pub fn centers(&self) -> impl Iterator<Item = f64> + '_ {
        let w = self.bin_width();
        (0..self.values.len()).map(move |i| self.lo + (i as f64 + 0.5) * w)
    }

    pub fn mean(&self) -> f64 {
        let w = self.bin_width();
        self.centers().zip(&self.values).map(|(x, &p)| x * p).sum::<f64>() * w
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let w = self.bin_width();
        self.centers().zip(&self.values).map(|(x, &p)| (x - m) * (x - m) * p).sum::<f64>() * w
    }

    /// Largest pointwise density difference against `f`.
    pub fn max_abs_diff(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.centers()
            .zip(&self.values)
            .map(|(x, &p)| (p - f(x)).abs())
            .fold(0.0, f64::max)
    }
}

/// Riemann-normalizes a pointwise non-negative function on [lo, hi].
pub fn grid_normalize_1d(f: impl Fn(f64) -> f64, lo: f64, hi: f64, bins: usize) -> Result<GridPdf> {
    assert!(bins > 0 && hi > lo);
    let w = (hi - lo) / bins as f64;
    let mut values: Vec<f64> = (0..bins).map(|i| f(lo + (i as f64 + 0.5) * w)).collect();
    let mass: f64 = values.iter().sum::<f64>() * w;
    if !mass.is_finite() || mass <= 0.0 {
        return Err(GmError::NonFinite("grid_normalize_1d mass"));
    }
    for v in &mut values {
        *v /= mass;
        if !v.is_finite() {
            return Err(GmError::NonFinite("grid_normalize_1d value"));
        }
    }
    Ok(GridPdf { lo, hi, values })
}

/// Scalar Monte-Carlo moment estimates with standard errors.
#[derive(Debug, Clone, Copy)]
pub struct McMoments {
    pub mean: f64,
    pub var: f64,
    pub mean_se: f64,
    pub var_se: f64,
    pub n: usize,
}

/// Estimates mean and variance of a scalar sampler.
pub fn mc_moments<R: Rng + ?Sized>(
    mut sampler: impl FnMut(&mut R) -> f64,
    n: usize,
    rng: &mut R,
) -> McMoments {
    assert!(n >= 2);
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    let mut sum4 = 0.0;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let x = sampler(rng);
        samples.push(x);
        sum += x;
    }
    let mean = sum / n as f64;
    for &x in &samples {
        let d = x - mean;
        sum2 += d * d;
        sum4 += d * d * d * d;
    }
    let var = sum2 / n as f64;
    let mean_se = (var / n as f64).sqrt();
    // SE of the variance estimate from the fourth central moment.
    let m4 = sum4 / n as f64;
    let var_se = ((m4 - var * var).max(0.0) / n as f64).sqrt();
    McMoments { mean, var, mean_se, var_se, n }
}
