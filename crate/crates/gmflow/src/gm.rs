//! Exact algebra on isotropic-component Gaussian mixtures and (possibly
//! improper) Gaussian factors in precision form.
//!
//! All densities are handled in log space; mixture weights materialize only
//! through softmax at API boundaries. Every operation is a pure function on
//! immutable values and safe to call from any thread.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{GmError, Result};

/// ln(2*pi)
pub const LN_2PI: f64 = 1.837_877_066_409_345_4;

/// Numerically safe softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&a| (a - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for w in &mut out {
        *w /= sum;
    }
    out
}

/// log(sum(exp(xs))) with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// A proper isotropic Gaussian N(mean, var * I).
#[derive(Debug, Clone, PartialEq)]
pub struct IsoGaussian {
    pub mean: Vec<f64>,
    pub var: f64,
}

impl IsoGaussian {
    pub fn new(mean: Vec<f64>, var: f64) -> Result<Self> {
        if !(var > 0.0) || !var.is_finite() {
            return Err(GmError::BadShape(format!("variance must be positive, got {var}")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(GmError::BadShape("non-finite mean".into()));
        }
        Ok(Self { mean, var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let d = self.dim() as f64;
        -0.5 * sq_dist(x, &self.mean) / self.var - 0.5 * d * (LN_2PI + self.var.ln())
    }
}

/// An unnormalized Gaussian factor exp(-lambda/2 ||x||^2 + eta . x + const)
/// in precision form. `precision` may be zero or negative; the factor is a
/// proper (normalizable) density iff `precision > 0`. This representation
/// carries likelihood ratios and stays well defined when a schedule
/// coefficient alpha_t hits zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalGaussian {
    pub precision: f64,
    pub precision_mean: Vec<f64>,
}

impl CanonicalGaussian {
    pub fn new(precision: f64, precision_mean: Vec<f64>) -> Result<Self> {
        if !precision.is_finite() || precision_mean.iter().any(|m| !m.is_finite()) {
            return Err(GmError::BadShape("non-finite canonical parameters".into()));
        }
        Ok(Self { precision, precision_mean })
    }

    /// N(mean, var * I)^gamma as a canonical factor.
    pub fn from_powered(g: &IsoGaussian, gamma: f64) -> Self {
        Self {
            precision: gamma / g.var,
            precision_mean: g.mean.iter().map(|m| gamma * m / g.var).collect(),
        }
    }

    pub fn from_gaussian(g: &IsoGaussian) -> Self {
        Self::from_powered(g, 1.0)
    }

    /// N(num)/N(den) as a single canonical factor (precisions subtract).
    pub fn from_ratio(num: &IsoGaussian, den: &IsoGaussian) -> Self {
        Self {
            precision: 1.0 / num.var - 1.0 / den.var,
            precision_mean: num
                .mean
                .iter()
                .zip(&den.mean)
                .map(|(n, d)| n / num.var - d / den.var)
                .collect(),
        }
    }

    /// Pointwise product of two factors (precisions and precision-means add).
    pub fn product(&self, other: &Self) -> Self {
        Self {
            precision: self.precision + other.precision,
            precision_mean: self
                .precision_mean
                .iter()
                .zip(&other.precision_mean)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn is_proper(&self) -> bool {
        self.precision > 0.0
    }

    pub fn dim(&self) -> usize {
        self.precision_mean.len()
    }

    pub fn to_gaussian(&self) -> Result<IsoGaussian> {
        if !self.is_proper() {
            return Err(GmError::NonPositivePrecision { precision: self.precision });
        }
        let var = 1.0 / self.precision;
        IsoGaussian::new(self.precision_mean.iter().map(|m| m * var).collect(), var)
    }
}

/// Powered conflation of two isotropic Gaussians:
/// p'(x) = p1^g1(x) p2^g2(x) / Z  (App-D style precision arithmetic).
pub fn conflate_gaussians(g1: &IsoGaussian, gamma1: f64, g2: &IsoGaussian, gamma2: f64) -> Result<IsoGaussian> {
    if g1.dim() != g2.dim() {
        return Err(GmError::BadShape(format!("dims {} vs {}", g1.dim(), g2.dim())));
    }
    CanonicalGaussian::from_powered(g1, gamma1)
        .product(&CanonicalGaussian::from_powered(g2, gamma2))
        .to_gaussian()
}

/// Isotropic Gaussian mixture with a standard deviation shared by all
/// components: sum_k softmax(logits)_k * N(means_k, std^2 * I).
///
/// `std == 0` is allowed only through [`IsoGaussianMixture::new_degenerate`]
/// (frozen evaluation contexts); ordinary construction requires `std > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct IsoGaussianMixture {
    logits: Vec<f64>,
    means: Vec<f64>, // k * dim, component-major
    std: f64,
    dim: usize,
}

impl IsoGaussianMixture {
    pub fn new(logits: Vec<f64>, means: Vec<f64>, std: f64, dim: usize) -> Result<Self> {
        if !(std > 0.0) || !std.is_finite() {
            return Err(GmError::BadShape(format!("shared std must be positive, got {std}")));
        }
        Self::build(logits, means, std, dim)
    }

    /// Same as [`new`](Self::new) but permits `std == 0` for frozen
    /// evaluation contexts (point-mass components).
    pub fn new_degenerate(logits: Vec<f64>, means: Vec<f64>, std: f64, dim: usize) -> Result<Self> {
        if !(std >= 0.0) || !std.is_finite() {
            return Err(GmError::BadShape(format!("std must be non-negative, got {std}")));
        }
        Self::build(logits, means, std, dim)
    }

    fn build(logits: Vec<f64>, means: Vec<f64>, std: f64, dim: usize) -> Result<Self> {
        if logits.is_empty() {
            return Err(GmError::BadShape("mixture needs at least one component".into()));
        }
        if dim == 0 || means.len() != logits.len() * dim {
            return Err(GmError::BadShape(format!(
                "means length {} does not match k={} * dim={}",
                means.len(),
                logits.len(),
                dim
            )));
        }
        if logits.iter().any(|a| !a.is_finite()) || means.iter().any(|m| !m.is_finite()) {
            return Err(GmError::BadShape("non-finite mixture parameters".into()));
        }
        Ok(Self { logits, means, std, dim })
    }

    /// Single standard-normal-style component.
    pub fn single(mean: Vec<f64>, std: f64) -> Result<Self> {
        let dim = mean.len();
        Self::new(vec![0.0], mean, std, dim)
    }

    pub fn k(&self) -> usize {
        self.logits.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn mean_of(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    /// Mixture mean sum_k A_k mu_k.
    pub fn mean(&self) -> Vec<f64> {
        let w = self.weights();
        let mut out = vec![0.0; self.dim];
        for k in 0..self.k() {
            let m = self.mean_of(k);
            for (o, &x) in out.iter_mut().zip(m) {
                *o += w[k] * x;
            }
        }
        out
    }

    /// Isotropic Gaussian surrogate matching the mixture's first two moments:
    /// var' = (1/D) sum_k A_k ||mu_k - mean||^2 + s^2.
    pub fn surrogate(&self) -> IsoGaussian {
        let w = self.weights();
        let mean = self.mean();
        let d = self.dim as f64;
        let mut spread = 0.0;
        for k in 0..self.k() {
            spread += w[k] * sq_dist(self.mean_of(k), &mean);
        }
        IsoGaussian { mean, var: spread / d + self.std * self.std }
    }

    /// Log density at `x` via max-subtracted log-sum-exp. Finite for all
    /// finite inputs when std > 0; a degenerate (std = 0) mixture yields an
    /// explicit -inf, never NaN.
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        if self.std == 0.0 {
            return f64::NEG_INFINITY;
        }
        let d = self.dim as f64;
        let inv_2var = 0.5 / (self.std * self.std);
        let log_norm = log_sum_exp(&self.logits);
        let terms: Vec<f64> = (0..self.k())
            .map(|k| {
                self.logits[k] - log_norm - sq_dist(x, self.mean_of(k)) * inv_2var
                    - d * self.std.ln()
            })
            .collect();
        log_sum_exp(&terms) - 0.5 * d * LN_2PI
    }

    /// Draws a component index from the softmax weights, then a point from
    /// that component. Skips the categorical draw when K = 1.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.sample_into(rng, &mut out);
        out
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        let k = if self.k() == 1 { 0 } else { self.sample_component(rng) };
        let mean = self.mean_of(k);
        for (o, &m) in out.iter_mut().zip(mean) {
            let eps: f64 = rng.sample(StandardNormal);
            *o = m + self.std * eps;
        }
    }

    pub fn sample_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let w = self.weights();
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (k, &wk) in w.iter().enumerate() {
            acc += wk;
            if u < acc {
                return k;
            }
        }
        w.len() - 1
    }

    /// Conflation with a proper isotropic Gaussian (normalized pointwise
    /// product). New logits follow a'_k = a_k - 1/2 (mu - mu_k)^T
    /// (Sigma + Sigma_k)^{-1} (mu - mu_k).
    pub fn conflate_gaussian(&self, g: &IsoGaussian) -> Result<Self> {
        if g.dim() != self.dim {
            return Err(GmError::BadShape(format!("dims {} vs {}", g.dim(), self.dim)));
        }
        let s2 = self.std * self.std;
        let new_var = 1.0 / (1.0 / s2 + 1.0 / g.var);
        let sum_var = g.var + s2;
        let mut logits = Vec::with_capacity(self.k());
        let mut means = Vec::with_capacity(self.means.len());
        for k in 0..self.k() {
            let mu_k = self.mean_of(k);
            logits.push(self.logits[k] - 0.5 * sq_dist(&g.mean, mu_k) / sum_var);
            for (i, &m) in mu_k.iter().enumerate() {
                means.push(new_var * (g.mean[i] / g.var + m / s2));
            }
        }
        Self::new(recenter(logits), means, new_var.sqrt(), self.dim)
    }

    /// Conflation with a canonical factor via the completed-square logit
    /// update. Equivalent to [`conflate_gaussian`](Self::conflate_gaussian)
    /// for proper factors but remains valid for any `precision` as long as
    /// the combined per-component precision stays positive.
    pub fn conflate_canonical(&self, c: &CanonicalGaussian) -> Result<Self> {
        if c.dim() != self.dim {
            return Err(GmError::BadShape(format!("dims {} vs {}", c.dim(), self.dim)));
        }
        let s2 = self.std * self.std;
        let combined = 1.0 / s2 + c.precision;
        if !(combined > 0.0) {
            return Err(GmError::NonPositivePrecision { precision: combined });
        }
        let new_var = 1.0 / combined;
        let mut logits = Vec::with_capacity(self.k());
        let mut means = Vec::with_capacity(self.means.len());
        for k in 0..self.k() {
            let mu_k = self.mean_of(k);
            let mut m_sq = 0.0;
            let mut mu_sq = 0.0;
            for (i, &m) in mu_k.iter().enumerate() {
                let pm = m / s2 + c.precision_mean[i];
                let new_m = pm * new_var;
                means.push(new_m);
                m_sq += new_m * new_m;
                mu_sq += m * m;
            }
            // Completed square: a'_k = a_k + 1/2 lambda' ||m'_k||^2 - ||mu_k||^2 / (2 s^2),
            // dropping terms shared across components.
            logits.push(self.logits[k] + 0.5 * combined * m_sq - 0.5 * mu_sq / s2);
        }
        Self::new(recenter(logits), means, new_var.sqrt(), self.dim)
    }

    /// Marginal of x1 where x1 | x2 ~ N(noise.mean + c * x2, noise.var * I)
    /// and x2 follows this mixture: means shift to noise.mean + c * mu_k,
    /// variances become noise.var + c^2 s^2, weights are unchanged.
    /// `noise.var == 0` is allowed and yields a scaled/shifted copy.
    pub fn convolve(&self, c: f64, noise_mean: &[f64], noise_var: f64) -> Result<Self> {
        if noise_mean.len() != self.dim {
            return Err(GmError::BadShape(format!("dims {} vs {}", noise_mean.len(), self.dim)));
        }
        if !(noise_var >= 0.0) {
            return Err(GmError::BadShape(format!("noise variance must be >= 0, got {noise_var}")));
        }
        let var = noise_var + c * c * self.std * self.std;
        let mut means = Vec::with_capacity(self.means.len());
        for k in 0..self.k() {
            for (i, &m) in self.mean_of(k).iter().enumerate() {
                means.push(noise_mean[i] + c * m);
            }
        }
        Self::new_degenerate(self.logits.clone(), means, var.sqrt(), self.dim)
    }

    /// Reparameterizes a velocity-space mixture into x0 space:
    /// mu_x = x_t - sigma_t * mu_u, s_x = sigma_t * s.
    pub fn to_x0_space(&self, x_t: &[f64], sigma_t: f64) -> Result<Self> {
        if sigma_t == 0.0 {
            return Err(GmError::DegenerateTime { t: 0.0, context: "u-to-x0 reparameterization" });
        }
        if x_t.len() != self.dim {
            return Err(GmError::BadShape(format!("dims {} vs {}", x_t.len(), self.dim)));
        }
        let mut means = Vec::with_capacity(self.means.len());
        for k in 0..self.k() {
            for (i, &m) in self.mean_of(k).iter().enumerate() {
                means.push(x_t[i] - sigma_t * m);
            }
        }
        Self::new_degenerate(self.logits.clone(), means, sigma_t * self.std, self.dim)
    }

    /// Inverse of [`to_x0_space`](Self::to_x0_space).
    pub fn to_u_space(&self, x_t: &[f64], sigma_t: f64) -> Result<Self> {
        if sigma_t == 0.0 {
            return Err(GmError::DegenerateTime { t: 0.0, context: "x0-to-u reparameterization" });
        }
        if x_t.len() != self.dim {
            return Err(GmError::BadShape(format!("dims {} vs {}", x_t.len(), self.dim)));
        }
        let mut means = Vec::with_capacity(self.means.len());
        for k in 0..self.k() {
            for (i, &m) in self.mean_of(k).iter().enumerate() {
                means.push((x_t[i] - m) / sigma_t);
            }
        }
        Self::new_degenerate(self.logits.clone(), means, self.std / sigma_t, self.dim)
    }

    /// Replaces the shared std (used by the DDPM baseline variants).
    pub fn with_std(&self, std: f64) -> Result<Self> {
        Self::new_degenerate(self.logits.clone(), self.means.clone(), std, self.dim)
    }
}

fn recenter(mut logits: Vec<f64>) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for a in &mut logits {
        *a -= max;
    }
    logits
}

/// Gaussian mixture with per-component isotropic variances. Produced by
/// conflations that do not preserve the shared-std structure (e.g. posteriors
/// of heteroscedastic data mixtures).
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroGaussianMixture {
    logits: Vec<f64>,
    means: Vec<f64>,
    stds: Vec<f64>,
    dim: usize,
}

impl HeteroGaussianMixture {
    pub fn new(logits: Vec<f64>, means: Vec<f64>, stds: Vec<f64>, dim: usize) -> Result<Self> {
        if logits.is_empty() || stds.len() != logits.len() || means.len() != logits.len() * dim {
            return Err(GmError::BadShape("inconsistent mixture shapes".into()));
        }
        if stds.iter().any(|s| !(*s > 0.0)) {
            return Err(GmError::BadShape("per-component stds must be positive".into()));
        }
        Ok(Self { logits, means, stds, dim })
    }

    pub fn k(&self) -> usize {
        self.logits.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    pub fn mean_of(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn mean(&self) -> Vec<f64> {
        let w = self.weights();
        let mut out = vec![0.0; self.dim];
        for k in 0..self.k() {
            for (o, &x) in out.iter_mut().zip(self.mean_of(k)) {
                *o += w[k] * x;
            }
        }
        out
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let d = self.dim as f64;
        let log_norm = log_sum_exp(&self.logits);
        let terms: Vec<f64> = (0..self.k())
            .map(|k| {
                let s = self.stds[k];
                self.logits[k] - log_norm
                    - 0.5 * sq_dist(x, self.mean_of(k)) / (s * s)
                    - d * s.ln()
            })
            .collect();
        log_sum_exp(&terms) - 0.5 * d * LN_2PI
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = if self.k() == 1 {
            0
        } else {
            let w = self.weights();
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut idx = w.len() - 1;
            for (i, &wk) in w.iter().enumerate() {
                acc += wk;
                if u < acc {
                    idx = i;
                    break;
                }
            }
            idx
        };
        let mean = self.mean_of(k);
        mean.iter()
            .map(|&m| {
                let eps: f64 = rng.sample(StandardNormal);
                m + self.stds[k] * eps
            })
            .collect()
    }

    /// Conflation with a canonical factor; per-component precisions differ,
    /// so the result stays heteroscedastic.
    pub fn conflate_canonical(&self, c: &CanonicalGaussian) -> Result<Self> {
        if c.dim() != self.dim {
            return Err(GmError::BadShape(format!("dims {} vs {}", c.dim(), self.dim)));
        }
        let mut logits = Vec::with_capacity(self.k());
        let mut means = Vec::with_capacity(self.means.len());
        let mut stds = Vec::with_capacity(self.k());
        for k in 0..self.k() {
            let s2 = self.stds[k] * self.stds[k];
            let combined = 1.0 / s2 + c.precision;
            if !(combined > 0.0) {
                return Err(GmError::NonPositivePrecision { precision: combined });
            }
            let new_var = 1.0 / combined;
            let mu_k = self.mean_of(k);
            let mut m_sq = 0.0;
            let mut mu_sq = 0.0;
            for (i, &m) in mu_k.iter().enumerate() {
                let new_m = (m / s2 + c.precision_mean[i]) * new_var;
                means.push(new_m);
                m_sq += new_m * new_m;
                mu_sq += m * m;
            }
            // Unlike the shared-std case the normalization term depends on k
            // through s_k, so it must stay in the logit.
            let d = self.dim as f64;
            logits.push(
                self.logits[k] + 0.5 * combined * m_sq - 0.5 * mu_sq / s2
                    - d * self.stds[k].ln()
                    - 0.5 * d * combined.ln(),
            );
            stds.push(new_var.sqrt());
        }
        Self::new(recenter(logits), means, stds, self.dim)
    }

    pub fn convolve(&self, c: f64, noise_mean: &[f64], noise_var: f64) -> Result<Self> {
        if noise_mean.len() != self.dim {
            return Err(GmError::BadShape(format!("dims {} vs {}", noise_mean.len(), self.dim)));
        }
        let mut means = Vec::with_capacity(self.means.len());
        let mut stds = Vec::with_capacity(self.k());
        for k in 0..self.k() {
            for (i, &m) in self.mean_of(k).iter().enumerate() {
                means.push(noise_mean[i] + c * m);
            }
            stds.push((noise_var + c * c * self.stds[k] * self.stds[k]).sqrt());
        }
        Self::new(self.logits.clone(), means, stds, self.dim)
    }
}

impl From<&IsoGaussianMixture> for HeteroGaussianMixture {
    fn from(gm: &IsoGaussianMixture) -> Self {
        Self {
            logits: gm.logits.clone(),
            means: gm.means.clone(),
            stds: vec![gm.std; gm.k()],
            dim: gm.dim,
        }
    }
}
