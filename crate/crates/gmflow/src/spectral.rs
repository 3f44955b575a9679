//! Spectral sampling at small-grid scale: per-pixel Knothe-Rosenblatt
//! transport between 1D mixtures and standard normals, a real-valued packing
//! of the orthonormal FFT, a tiny learned power spectrum, the
//! spectrum-enhanced density, and the matching loss.

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{GmError, Result};
use crate::fft;
use crate::gm::{log_sum_exp, softmax, IsoGaussianMixture, LN_2PI};
use crate::net::{softplus, GmMlp, HeadKind};
use crate::schedule::LinearSchedule;

/// KR transport saturates past this many standard-normal sigmas; values are
/// clamped (with a warning) rather than returned as +-inf.
pub const TAIL_CLAMP: f64 = 8.0;

/// Standard normal CDF via erfc for stable tails.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal quantile; uses the erfc inverse on whichever tail is
/// closer for accuracy.
pub fn std_normal_quantile(p: f64) -> f64 {
    if p <= 0.5 {
        -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
    } else {
        std::f64::consts::SQRT_2 * erfc_inv(2.0 * (1.0 - p))
    }
}

fn gm1_cdf(x: f64, logits: &[f64], means: &[f64], std: f64) -> f64 {
    let w = softmax(logits);
    let mut c = 0.0;
    for (k, &m) in means.iter().enumerate() {
        c += w[k] * std_normal_cdf((x - m) / std);
    }
    c
}

fn gm1_pdf(x: f64, logits: &[f64], means: &[f64], std: f64) -> f64 {
    let log_norm = log_sum_exp(logits);
    let mut p = 0.0;
    for (k, &m) in means.iter().enumerate() {
        let z = (x - m) / std;
        p += (logits[k] - log_norm).exp() * (-0.5 * z * z).exp();
    }
    p / (std * (2.0 * std::f64::consts::PI).sqrt())
}

/// KR forward map: zeta = Phi^{-1}(F_gm(x)). Clamped to +-TAIL_CLAMP when
/// the CDF saturates.
pub fn kr_forward(x: f64, gm: &IsoGaussianMixture) -> f64 {
    assert_eq!(gm.dim(), 1, "KR transport is per-pixel (1D)");
    kr_forward_raw(x, gm.logits(), gm.means(), gm.std())
}

fn kr_forward_raw(x: f64, logits: &[f64], means: &[f64], std: f64) -> f64 {
    let p = gm1_cdf(x, logits, means, std);
    let z = std_normal_quantile(p.clamp(0.0, 1.0));
    if !z.is_finite() || z.abs() > TAIL_CLAMP {
        log::warn!("kr_forward tail clamp at x = {x} (zeta = {z})");
        z.clamp(-TAIL_CLAMP, TAIL_CLAMP)
    } else {
        z
    }
}

/// KR inverse: solves F_gm(x) = Phi(zeta) by bracketed bisection with Newton
/// polish, to |F_gm(x) - Phi(zeta)| < 1e-12.
pub fn kr_inverse(zeta: f64, gm: &IsoGaussianMixture) -> f64 {
    assert_eq!(gm.dim(), 1);
    kr_inverse_raw(zeta, gm.logits(), gm.means(), gm.std())
}

fn kr_inverse_raw(zeta: f64, logits: &[f64], means: &[f64], std: f64) -> f64 {
    let zeta = if zeta.abs() > TAIL_CLAMP {
        log::warn!("kr_inverse tail clamp at zeta = {zeta}");
        zeta.clamp(-TAIL_CLAMP, TAIL_CLAMP)
    } else {
        zeta
    };
    let target = std_normal_cdf(zeta);
    let (mut lo, mut hi) = bracket(logits, means, std, target);
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let f = gm1_cdf(x, logits, means, std) - target;
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let pdf = gm1_pdf(x, logits, means, std);
        let newton = x - f / pdf;
        let next = if pdf > 1e-300 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        let step = (next - x).abs();
        x = next;
        // Stop on both the CDF residual and Newton-step convergence; the
        // residual alone leaves O(residual / pdf) error in the tails.
        if f.abs() < 1e-12 && step < 1e-12 * (1.0 + x.abs()) {
            break;
        }
    }
    x
}

fn bracket(logits: &[f64], means: &[f64], std: f64, target: f64) -> (f64, f64) {
    let mmin = means.iter().cloned().fold(f64::INFINITY, f64::min);
    let mmax = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut lo = mmin - 10.0 * std;
    let mut hi = mmax + 10.0 * std;
    while gm1_cdf(lo, logits, means, std) > target {
        lo -= 8.0 * std;
    }
    while gm1_cdf(hi, logits, means, std) < target {
        hi += 8.0 * std;
    }
    (lo, hi)
}

// ---- FFT packing ------------------------------------------------------------

/// z_r = Re[z] + Im[z] with z = orthonormal FFT2(zeta). Invertible because z
/// is Hermitian-symmetric for real zeta.
pub fn fft_pack(zeta: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    let mut re = zeta.to_vec();
    let mut im = vec![0.0; zeta.len()];
    fft::fft2d(&mut re, &mut im, h, w, false)?;
    Ok(re.iter().zip(&im).map(|(r, i)| r + i).collect())
}

/// Reconstructs zeta from the packed representation: over conjugate index
/// pairs, Re z[k] = (z_r[k] + z_r[-k]) / 2 and Im z[k] = (z_r[k] - z_r[-k]) / 2;
/// self-conjugate frequencies (DC and Nyquist combinations) carry Re only.
pub fn fft_unpack(z_r: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    if z_r.len() != h * w {
        return Err(GmError::BadShape(format!("packed grid length {} != {h}x{w}", z_r.len())));
    }
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let ic = (h - i) % h;
            let jc = (w - j) % w;
            let a = z_r[i * w + j];
            let b = z_r[ic * w + jc];
            re[i * w + j] = 0.5 * (a + b);
            im[i * w + j] = 0.5 * (a - b);
        }
    }
    fft::fft2d(&mut re, &mut im, h, w, true)?;
    Ok(re)
}

// ---- per-pixel mixtures -------------------------------------------------------

/// Per-pixel 1D mixtures on an H x W grid in x0 space: per-pixel logits and
/// means, shared K, one shared std per image.
#[derive(Debug, Clone)]
pub struct PixelwiseGm {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    /// `[pixel][k]` flattened.
    pub logits: Vec<f64>,
    /// `[pixel][k]` flattened.
    pub means: Vec<f64>,
    pub std: f64,
}

impl PixelwiseGm {
    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn pixel_logits(&self, p: usize) -> &[f64] {
        &self.logits[p * self.k..(p + 1) * self.k]
    }

    pub fn pixel_means(&self, p: usize) -> &[f64] {
        &self.means[p * self.k..(p + 1) * self.k]
    }

    pub fn pixel_gm(&self, p: usize) -> IsoGaussianMixture {
        IsoGaussianMixture::new(
            self.pixel_logits(p).to_vec(),
            self.pixel_means(p).to_vec(),
            self.std,
            1,
        )
        .expect("valid pixel mixture")
    }

    /// Runs a D=1 model on every pixel of a noisy grid and reparameterizes
    /// into x0 space. The shared per-image std comes from the mean of the
    /// per-pixel std pre-activations.
    pub fn from_model(model: &GmMlp, x_t: &[f64], t: f64, h: usize, w: usize) -> Result<Self> {
        if model.cfg.data_dim != 1 || model.cfg.head != HeadKind::Gm {
            return Err(GmError::BadShape("pixelwise model must be a D=1 GM head".into()));
        }
        if x_t.len() != h * w {
            return Err(GmError::BadShape(format!("grid length {} != {h}x{w}", x_t.len())));
        }
        let sched = LinearSchedule;
        let sigma_t = sched.sigma(t);
        if sigma_t == 0.0 {
            return Err(GmError::DegenerateTime { t, context: "pixelwise GM at sigma_t = 0" });
        }
        let n = h * w;
        let in_dim = model.cfg.input_dim();
        let mut inputs = vec![0.0; n * in_dim];
        for p in 0..n {
            model.embed_input(&x_t[p..p + 1], t, None, &mut inputs[p * in_dim..(p + 1) * in_dim]);
        }
        let mut raw = Vec::new();
        model.infer_batch(&inputs, n, &mut raw);
        let k = model.cfg.k;
        let hd = model.cfg.head_dim();
        let mut logits = Vec::with_capacity(n * k);
        let mut means = Vec::with_capacity(n * k);
        let mut s_pre_sum = 0.0;
        for p in 0..n {
            let row = &raw[p * hd..(p + 1) * hd];
            logits.extend_from_slice(&row[..k]);
            for ki in 0..k {
                // u-space mean -> x0-space mean.
                means.push(x_t[p] - sigma_t * row[k + ki]);
            }
            s_pre_sum += row[2 * k];
        }
        let s_u = softplus(s_pre_sum / n as f64) + model.cfg.s_min;
        Ok(Self { h, w, k, logits, means, std: sigma_t * s_u })
    }

    pub fn log_pdf_pixel(&self, p: usize, x: f64) -> f64 {
        let logits = self.pixel_logits(p);
        let means = self.pixel_means(p);
        let log_norm = log_sum_exp(logits);
        let inv_2var = 0.5 / (self.std * self.std);
        let terms: Vec<f64> = means
            .iter()
            .zip(logits)
            .map(|(&m, &a)| a - log_norm - (x - m) * (x - m) * inv_2var - self.std.ln())
            .collect();
        log_sum_exp(&terms) - 0.5 * LN_2PI
    }

    /// Sum of per-pixel log densities (the factorized density).
    pub fn factorized_log_pdf(&self, x0: &[f64]) -> f64 {
        assert_eq!(x0.len(), self.pixels());
        (0..self.pixels()).map(|p| self.log_pdf_pixel(p, x0[p])).sum()
    }

    /// The two pooled statistics feeding the spectrum head: mean over pixels
    /// of per-pixel GM variances, and variance over pixels of per-pixel GM
    /// means.
    pub fn head_stats(&self) -> [f64; 2] {
        let n = self.pixels();
        let mut var_sum = 0.0;
        let mut means = Vec::with_capacity(n);
        for p in 0..n {
            let w = softmax(self.pixel_logits(p));
            let ms = self.pixel_means(p);
            let mean: f64 = w.iter().zip(ms).map(|(wk, m)| wk * m).sum();
            let spread: f64 = w.iter().zip(ms).map(|(wk, m)| wk * (m - mean) * (m - mean)).sum();
            var_sum += spread + self.std * self.std;
            means.push(mean);
        }
        let mean_of_means = means.iter().sum::<f64>() / n as f64;
        let var_of_means =
            means.iter().map(|m| (m - mean_of_means) * (m - mean_of_means)).sum::<f64>() / n as f64;
        [var_sum / n as f64, var_of_means]
    }

    pub fn kr_forward_grid(&self, x0: &[f64]) -> Vec<f64> {
        assert_eq!(x0.len(), self.pixels());
        (0..self.pixels())
            .map(|p| kr_forward_raw(x0[p], self.pixel_logits(p), self.pixel_means(p), self.std))
            .collect()
    }
}

// ---- spectrum head ------------------------------------------------------------

/// Two-layer MLP mapping the two pooled GM statistics to a power spectrum:
/// softmax output scaled by D so a flat spectrum has unit entries, and
/// s_F = sqrt(power).
#[derive(Debug, Clone)]
pub struct SpectrumHead {
    pub w1: Vec<f64>, // hidden x 2
    pub b1: Vec<f64>,
    pub w2: Vec<f64>, // d x hidden
    pub b2: Vec<f64>,
    pub hidden: usize,
    pub d: usize,
}

/// Activations cached by [`SpectrumHead::forward`] for the backward pass.
pub struct SpectrumTape {
    pub stats: [f64; 2],
    pub pre1: Vec<f64>,
    pub act1: Vec<f64>,
    pub power: Vec<f64>,
    pub s_f: Vec<f64>,
}

impl SpectrumHead {
    pub fn new<R: Rng + ?Sized>(d: usize, hidden: usize, rng: &mut R) -> Self {
        let mut head = Self {
            w1: vec![0.0; hidden * 2],
            b1: vec![0.0; hidden],
            w2: vec![0.0; d * hidden],
            b2: vec![0.0; d],
            hidden,
            d,
        };
        for v in head.w1.iter_mut() {
            let x: f64 = rng.sample(StandardNormal);
            *v = 0.5 * x;
        }
        for v in head.w2.iter_mut() {
            let x: f64 = rng.sample(StandardNormal);
            *v = 0.02 * x;
        }
        head
    }

    pub fn forward(&self, stats: [f64; 2]) -> SpectrumTape {
        let mut pre1 = vec![0.0; self.hidden];
        for h in 0..self.hidden {
            pre1[h] = self.b1[h] + self.w1[h * 2] * stats[0] + self.w1[h * 2 + 1] * stats[1];
        }
        let act1: Vec<f64> = pre1.iter().map(|&x| x / (1.0 + (-x).exp())).collect();
        let mut logits = vec![0.0; self.d];
        for o in 0..self.d {
            let mut acc = self.b2[o];
            for h in 0..self.hidden {
                acc += self.w2[o * self.hidden + h] * act1[h];
            }
            logits[o] = acc;
        }
        let mut power = softmax(&logits);
        for p in power.iter_mut() {
            *p *= self.d as f64;
        }
        let s_f = power.iter().map(|&p| p.sqrt()).collect();
        SpectrumTape { stats, pre1, act1, power, s_f }
    }

    /// Convenience: the magnitude spectrum for a pixelwise prediction.
    pub fn spectrum(&self, pix: &PixelwiseGm) -> Vec<f64> {
        self.forward(pix.head_stats()).s_f
    }

    /// Backward from dL/ds_F to parameter gradients. The head statistics are
    /// treated as constants (gradient is stopped before the main model).
    pub fn backward(&self, tape: &SpectrumTape, d_sf: &[f64]) -> SpectrumHeadGrads {
        // s_F = sqrt(D p), p = softmax(logits): dL/dlogit_j =
        // (dL/ds_F_j s_F_j / 2) - p_j sum_i (dL/ds_F_i s_F_i / 2).
        let half: Vec<f64> = d_sf.iter().zip(&tape.s_f).map(|(g, s)| 0.5 * g * s).collect();
        let total: f64 = half.iter().sum();
        let d_logits: Vec<f64> = (0..self.d)
            .map(|j| half[j] - tape.power[j] / self.d as f64 * total)
            .collect();
        let mut g = SpectrumHeadGrads {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: d_logits.clone(),
        };
        let mut d_act1 = vec![0.0; self.hidden];
        for o in 0..self.d {
            let gl = d_logits[o];
            for h in 0..self.hidden {
                g.w2[o * self.hidden + h] = gl * tape.act1[h];
                d_act1[h] += gl * self.w2[o * self.hidden + h];
            }
        }
        for h in 0..self.hidden {
            let sig = 1.0 / (1.0 + (-tape.pre1[h]).exp());
            let d_pre = d_act1[h] * sig * (1.0 + tape.pre1[h] * (1.0 - sig));
            g.b1[h] = d_pre;
            g.w1[h * 2] = d_pre * tape.stats[0];
            g.w1[h * 2 + 1] = d_pre * tape.stats[1];
        }
        g
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn param_mut(&mut self, idx: usize) -> &mut f64 {
        let mut i = idx;
        for v in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            if i < v.len() {
                return &mut v[i];
            }
            i -= v.len();
        }
        panic!("spectrum head parameter index out of range");
    }

    pub fn grad_at(g: &SpectrumHeadGrads, idx: usize) -> f64 {
        let mut i = idx;
        for v in [&g.w1, &g.b1, &g.w2, &g.b2] {
            if i < v.len() {
                return v[i];
            }
            i -= v.len();
        }
        panic!("spectrum head gradient index out of range");
    }
}

pub struct SpectrumHeadGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

// ---- spectrum-enhanced density and loss -----------------------------------

/// log q^S(x0 | x_t): the factorized per-pixel log density plus the spectral
/// correction log N(z_r; 0, diag(s_F)^2) - log N(z_r; 0, I).
pub fn spectral_log_pdf(x0: &[f64], pix: &PixelwiseGm, s_f: &[f64]) -> Result<f64> {
    if s_f.len() != pix.pixels() {
        return Err(GmError::BadShape("spectrum length != pixel count".into()));
    }
    let zeta = pix.kr_forward_grid(x0);
    let z_r = fft_pack(&zeta, pix.h, pix.w)?;
    let mut corr = 0.0;
    for (z, s) in z_r.iter().zip(s_f) {
        corr += -0.5 * z * z * (1.0 / (s * s) - 1.0) - s.ln();
    }
    Ok(pix.factorized_log_pdf(x0) + corr)
}

/// The spectral loss -log [N(z_r; 0, diag(s_F)^2) / N(z_r; 0, I)] =
/// 1/2 sum_i z_i^2 (s_i^{-2} - 1) + sum_i log s_i. Zero when s_F = 1; the
/// per-entry minimizer over a batch is the RMS of z_r.
pub fn spectral_loss(z_r: &[f64], s_f: &[f64]) -> f64 {
    z_r.iter()
        .zip(s_f)
        .map(|(z, s)| 0.5 * z * z * (1.0 / (s * s) - 1.0) + s.ln())
        .sum()
}

/// dL/ds_F of [`spectral_loss`].
pub fn spectral_loss_grad(z_r: &[f64], s_f: &[f64]) -> Vec<f64> {
    z_r.iter().zip(s_f).map(|(z, s)| -z * z / (s * s * s) + 1.0 / s).collect()
}

/// Draws z_r entries from N(0, s_F^2), unpacks to a correlated standard
/// field, and maps through the per-pixel KR inverses.
pub fn spectral_sample<R: Rng + ?Sized>(
    pix: &PixelwiseGm,
    s_f: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    if s_f.len() != pix.pixels() {
        return Err(GmError::BadShape("spectrum length != pixel count".into()));
    }
    let z_r: Vec<f64> = s_f
        .iter()
        .map(|&s| {
            let eps: f64 = rng.sample(StandardNormal);
            s * eps
        })
        .collect();
    let zeta = fft_unpack(&z_r, pix.h, pix.w)?;
    Ok((0..pix.pixels())
        .map(|p| kr_inverse_raw(zeta[p], pix.pixel_logits(p), pix.pixel_means(p), pix.std))
        .collect())
}

/// Full image sampling loop: per step, a pixelwise prediction, an x0 draw
/// (spectral when a spectrum head is given, factorized otherwise), then the
/// per-pixel stochastic transition.
pub fn sample_image<R: Rng + ?Sized>(
    model: &GmMlp,
    head: Option<&SpectrumHead>,
    nfe: usize,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let sched = LinearSchedule;
    let mut x: Vec<f64> = (0..h * w).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    for step in 0..nfe {
        let t = (nfe - step) as f64 / nfe as f64;
        let dt = t - (nfe - step - 1) as f64 / nfe as f64;
        let pix = PixelwiseGm::from_model(model, &x, t, h, w)?;
        let x0_hat = match head {
            Some(hd) => spectral_sample(&pix, &hd.spectrum(&pix), rng)?,
            None => (0..pix.pixels())
                .map(|p| pix.pixel_gm(p).sample(rng)[0])
                .collect(),
        };
        let c = sched.ddim_coeffs(t, dt)?;
        let sd = c.c3.max(0.0).sqrt();
        for (xi, &x0) in x.iter_mut().zip(&x0_hat) {
            let eps: f64 = rng.sample(StandardNormal);
            *xi = c.c1 * *xi + c.c2 * x0 + sd * eps;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gm1(logits: Vec<f64>, means: Vec<f64>, std: f64) -> IsoGaussianMixture {
        IsoGaussianMixture::new(logits, means, std, 1).unwrap()
    }

    #[test]
    fn single_component_kr_is_affine() {
        let gm = gm1(vec![0.0], vec![1.3], 0.7);
        for &x in &[-2.0, 0.0, 0.5, 3.0] {
            assert_abs_diff_eq!(kr_forward(x, &gm), (x - 1.3) / 0.7, epsilon = 1e-9);
        }
    }

    #[test]
    fn kr_round_trip_sweep() {
        let gm = gm1(vec![0.4, -0.8, 0.1], vec![-1.5, 0.2, 2.0], 0.5);
        for i in 0..1000 {
            let x = -4.0 + 8.0 * i as f64 / 999.0;
            let z = kr_forward(x, &gm);
            if z.abs() < TAIL_CLAMP {
                let back = kr_inverse(z, &gm);
                assert!((back - x).abs() < 1e-9, "x {x} -> z {z} -> {back}");
            }
        }
    }

    #[test]
    fn kr_inverse_meets_cdf_tolerance() {
        let gm = gm1(vec![0.0, 0.0], vec![-2.0, 2.0], 0.3);
        for i in 0..200 {
            let z = -6.0 + 12.0 * i as f64 / 199.0;
            let x = kr_inverse(z, &gm);
            let err = (gm1_cdf(x, gm.logits(), gm.means(), gm.std()) - std_normal_cdf(z)).abs();
            assert!(err < 1e-12, "cdf residual {err} at z {z}");
        }
    }

    #[test]
    fn probability_integral_transform_gives_standard_normal() {
        // KS statistic of zeta = T(x), x ~ gm, against N(0,1).
        let gm = gm1(vec![0.2, -0.4], vec![-1.0, 1.5], 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut zs: Vec<f64> = (0..n).map(|_| kr_forward(gm.sample(&mut rng)[0], &gm)).collect();
        zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks: f64 = 0.0;
        for (i, &z) in zs.iter().enumerate() {
            let cdf = std_normal_cdf(z);
            let emp_hi = (i + 1) as f64 / n as f64;
            let emp_lo = i as f64 / n as f64;
            ks = ks.max((cdf - emp_lo).abs()).max((cdf - emp_hi).abs());
        }
        // 1% critical value ~ 1.63 / sqrt(n).
        let crit = 1.63 / (n as f64).sqrt();
        assert!(ks < crit, "KS {ks} vs critical {crit}");
    }

    #[test]
    fn pack_constant_grid_is_dc_only() {
        let (h, w) = (8, 8);
        let c = 0.37;
        let z_r = fft_pack(&vec![c; h * w], h, w).unwrap();
        assert_abs_diff_eq!(z_r[0], c * ((h * w) as f64).sqrt(), epsilon = 1e-12);
        for &v in &z_r[1..] {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn pack_round_trip_and_energy() {
        let (h, w) = (16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zeta: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z_r = fft_pack(&zeta, h, w).unwrap();
        let back = fft_unpack(&z_r, h, w).unwrap();
        for (a, b) in zeta.iter().zip(&back) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let e1: f64 = zeta.iter().map(|v| v * v).sum();
        let e2: f64 = z_r.iter().map(|v| v * v).sum();
        assert_abs_diff_eq!(e1, e2, epsilon = 1e-9);
    }

    fn fixed_pixelwise(h: usize, w: usize) -> PixelwiseGm {
        let k = 2;
        let mut logits = Vec::new();
        let mut means = Vec::new();
        for p in 0..h * w {
            let f = p as f64 / (h * w) as f64;
            logits.extend_from_slice(&[0.3 - f, -0.2 + 0.5 * f]);
            means.extend_from_slice(&[-0.8 + f, 0.9 - 0.3 * f]);
        }
        PixelwiseGm { h, w, k, logits, means, std: 0.45 }
    }

    #[test]
    fn unit_spectrum_reduces_to_factorized_density() {
        let pix = fixed_pixelwise(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let s_f = vec![1.0; 16];
        let spectral = spectral_log_pdf(&x0, &pix, &s_f).unwrap();
        let fact = pix.factorized_log_pdf(&x0);
        assert_abs_diff_eq!(spectral, fact, epsilon = 1e-12);
    }

    #[test]
    fn spectral_loss_zero_at_unit_spectrum() {
        let z = vec![0.3, -1.2, 0.8, 2.0];
        assert_eq!(spectral_loss(&z, &vec![1.0; 4]), 0.0);
    }

    #[test]
    fn spectral_loss_minimizer_is_rms() {
        // First-order condition per entry: d/ds [z^2/(2 s^2) + ln s] = 0 at
        // s = |z|; over a batch, s* = RMS. Check by direct gradient descent.
        let zs = [vec![0.5, -2.0], vec![1.5, 0.3], vec![-0.7, 1.1]];
        let mut s = vec![1.0, 1.0];
        for _ in 0..20_000 {
            let mut g = vec![0.0, 0.0];
            for z in &zs {
                let gi = spectral_loss_grad(z, &s);
                g[0] += gi[0];
                g[1] += gi[1];
            }
            s[0] -= 1e-3 * g[0];
            s[1] -= 1e-3 * g[1];
        }
        for i in 0..2 {
            let rms = (zs.iter().map(|z| z[i] * z[i]).sum::<f64>() / zs.len() as f64).sqrt();
            assert_abs_diff_eq!(s[i], rms, epsilon = 1e-6);
        }
    }

    #[test]
    fn spectrum_head_outputs_positive_and_sum_to_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let head = SpectrumHead::new(64, 16, &mut rng);
        let tape = head.forward([0.7, 0.2]);
        assert!(tape.power.iter().all(|&p| p > 0.0));
        assert_abs_diff_eq!(tape.power.iter().sum::<f64>(), 64.0, epsilon = 1e-9);
        for (s, p) in tape.s_f.iter().zip(&tape.power) {
            assert_abs_diff_eq!(s * s, *p, epsilon = 1e-12);
        }
    }

    #[test]
    fn spectrum_head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut head = SpectrumHead::new(8, 6, &mut rng);
        let z_r: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let stats = [0.9, 0.4];
        let loss_of = |h: &SpectrumHead| {
            let t = h.forward(stats);
            spectral_loss(&z_r, &t.s_f)
        };
        let tape = head.forward(stats);
        let d_sf = spectral_loss_grad(&z_r, &tape.s_f);
        let grads = head.backward(&tape, &d_sf);
        let eps = 1e-6;
        for idx in 0..head.param_count() {
            let orig = *head.param_mut(idx);
            *head.param_mut(idx) = orig + eps;
            let up = loss_of(&head);
            *head.param_mut(idx) = orig - eps;
            let down = loss_of(&head);
            *head.param_mut(idx) = orig;
            let fd = (up - down) / (2.0 * eps);
            let ad = SpectrumHead::grad_at(&grads, idx);
            let denom = fd.abs().max(ad.abs()).max(1e-8);
            assert!((fd - ad).abs() / denom < 1e-3, "param {idx}: fd {fd} vs ad {ad}");
        }
    }

    #[test]
    fn dc_only_spectrum_yields_constant_fields() {
        // All power at DC: every draw is spatially constant (identical
        // per-pixel mixtures make the constant visible in x0 too).
        let (h, w) = (8, 8);
        let d = h * w;
        let k = 2;
        let pix = PixelwiseGm {
            h,
            w,
            k,
            logits: vec![0.0; d * k],
            means: [-1.0, 1.0].repeat(d),
            std: 0.4,
        };
        let mut s_f = vec![0.0; d];
        s_f[0] = (d as f64).sqrt();
        // Tiny floor elsewhere to keep s_F valid.
        for v in s_f.iter_mut().skip(1) {
            *v = 1e-9;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let x0 = spectral_sample(&pix, &s_f, &mut rng).unwrap();
            let first = x0[0];
            for &v in &x0 {
                assert_abs_diff_eq!(v, first, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn low_pass_spectra_increase_autocorrelation() {
        let (h, w) = (8, 8);
        let d = h * w;
        let k = 1;
        let pix = PixelwiseGm {
            h,
            w,
            k,
            logits: vec![0.0; d],
            means: vec![0.0; d],
            std: 1.0,
        };
        // Three spectra with increasing low-frequency concentration, each
        // normalized to total power d.
        let spectra: Vec<Vec<f64>> = [0.0f64, 1.5, 4.0]
            .iter()
            .map(|&gamma| {
                let mut pw: Vec<f64> = (0..h)
                    .flat_map(|i| {
                        (0..w).map(move |j| {
                            let fi = i.min(h - i) as f64;
                            let fj = j.min(w - j) as f64;
                            (1.0 + fi * fi + fj * fj).powf(-gamma / 2.0)
                        })
                    })
                    .collect();
                let total: f64 = pw.iter().sum();
                for v in pw.iter_mut() {
                    *v *= d as f64 / total;
                }
                pw.iter().map(|p| p.sqrt()).collect()
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut acs = Vec::new();
        for s_f in &spectra {
            let mut num = 0.0;
            let mut den = 0.0;
            for _ in 0..2000 {
                let x0 = spectral_sample(&pix, s_f, &mut rng).unwrap();
                for i in 0..h {
                    for j in 0..w - 1 {
                        num += x0[i * w + j] * x0[i * w + j + 1];
                        den += x0[i * w + j] * x0[i * w + j];
                    }
                }
            }
            acs.push(num / den);
        }
        assert!(
            acs[0] < acs[1] && acs[1] < acs[2],
            "autocorrelation not monotone: {acs:?}"
        );
    }

    #[test]
    fn unit_spectrum_sampling_matches_factorized_marginals() {
        // With s_F = 1 each pixel's marginal equals its mixture: KS test on
        // one pixel.
        let pix = fixed_pixelwise(4, 4);
        let s_f = vec![1.0; 16];
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 20_000;
        let pixel = 5;
        let mut xs: Vec<f64> =
            (0..n).map(|_| spectral_sample(&pix, &s_f, &mut rng).unwrap()[pixel]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let gm = pix.pixel_gm(pixel);
        let mut ks: f64 = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            let cdf = gm1_cdf(x, gm.logits(), gm.means(), gm.std());
            ks = ks.max((cdf - i as f64 / n as f64).abs());
            ks = ks.max((cdf - (i + 1) as f64 / n as f64).abs());
        }
        let crit = 1.63 / (n as f64).sqrt();
        assert!(ks < crit, "KS {ks} vs {crit}");
    }
}
