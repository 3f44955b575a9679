//! The linear flow-matching noise schedule (T = 1, alpha_t = 1 - t,
//! sigma_t = t) and the transition coefficients derived from it.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{GmError, Result};

/// Parameter-free linear schedule. Kept as a type so an alternative schedule
/// could slot in, though none is implemented.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearSchedule;

impl LinearSchedule {
    pub fn alpha(&self, t: f64) -> f64 {
        1.0 - t
    }

    pub fn sigma(&self, t: f64) -> f64 {
        t
    }

    /// Forward transition variance beta_{t,dt} = sigma_t^2 -
    /// (alpha_t^2 / alpha_{t-dt}^2) sigma_{t-dt}^2.
    pub fn beta(&self, t: f64, dt: f64) -> Result<f64> {
        check_step(t, dt)?;
        let prev = t - dt;
        let a_prev = self.alpha(prev);
        if a_prev == 0.0 {
            return Err(GmError::DegenerateTime { t: prev, context: "alpha_{t-dt} = 0 in beta" });
        }
        let ratio = self.alpha(t) / a_prev;
        Ok(self.sigma(t).powi(2) - ratio * ratio * self.sigma(prev).powi(2))
    }

    /// Coefficients of the one-step denoising transition
    /// p(x_{t-dt} | x_t, x0) = N(c1 x_t + c2 x0, c3 I).
    pub fn ddim_coeffs(&self, t: f64, dt: f64) -> Result<TransitionCoeffs> {
        check_step(t, dt)?;
        let sigma_t2 = self.sigma(t).powi(2);
        if sigma_t2 == 0.0 {
            return Err(GmError::DegenerateTime { t, context: "sigma_t = 0 in ddim_coeffs" });
        }
        let prev = t - dt;
        let beta = self.beta(t, dt)?;
        let c1 = self.sigma(prev).powi(2) / sigma_t2 * (self.alpha(t) / self.alpha(prev));
        let c2 = beta / sigma_t2 * self.alpha(prev);
        let c3 = beta / sigma_t2 * self.sigma(prev).powi(2);
        Ok(TransitionCoeffs { c1, c2, c3, beta })
    }

    /// x_t = alpha_t x0 + sigma_t eps.
    pub fn forward_diffuse<R: Rng + ?Sized>(&self, x0: &[f64], t: f64, rng: &mut R) -> Vec<f64> {
        let (a, s) = (self.alpha(t), self.sigma(t));
        x0.iter()
            .map(|&x| {
                let eps: f64 = rng.sample(StandardNormal);
                a * x + s * eps
            })
            .collect()
    }

    /// One forward transition draw x_t ~ N((alpha_t / alpha_{t-dt}) x_{t-dt}, beta I).
    pub fn forward_transition<R: Rng + ?Sized>(
        &self,
        x_prev: &[f64],
        t: f64,
        dt: f64,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let beta = self.beta(t, dt)?;
        let scale = self.alpha(t) / self.alpha(t - dt);
        let sd = beta.max(0.0).sqrt();
        Ok(x_prev
            .iter()
            .map(|&x| {
                let eps: f64 = rng.sample(StandardNormal);
                scale * x + sd * eps
            })
            .collect())
    }
}

fn check_step(t: f64, dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt <= t && t <= 1.0) {
        return Err(GmError::DegenerateTime { t, context: "step must satisfy 0 < dt <= t <= 1" });
    }
    Ok(())
}

/// Coefficients of one reverse transition plus the forward variance
/// beta_{t,dt} they were derived from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionCoeffs {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub beta: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn boundary_conditions() {
        let s = LinearSchedule;
        assert_eq!(s.alpha(0.0), 1.0);
        assert_eq!(s.sigma(0.0), 0.0);
        assert_eq!(s.alpha(1.0), 0.0);
        assert_eq!(s.sigma(1.0), 1.0);
    }

    #[test]
    fn beta_full_interval_is_one() {
        let s = LinearSchedule;
        assert_abs_diff_eq!(s.beta(1.0, 1.0).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn beta_known_value() {
        let s = LinearSchedule;
        assert_abs_diff_eq!(s.beta(0.5, 0.25).unwrap(), 0.25 - 0.25 / 0.5625 * 0.0625, epsilon = 1e-15);
        assert_abs_diff_eq!(s.beta(0.5, 0.25).unwrap(), 0.2222222222222222, epsilon = 1e-12);
    }

    #[test]
    fn beta_nonnegative_on_grid() {
        let s = LinearSchedule;
        for i in 1..=40 {
            let t = i as f64 / 40.0;
            for j in 1..=i {
                let dt = j as f64 / 40.0;
                assert!(s.beta(t, dt).unwrap() >= -1e-15, "beta < 0 at t={t}, dt={dt}");
            }
        }
    }

    #[test]
    fn full_step_coeffs_return_x0() {
        let c = LinearSchedule.ddim_coeffs(1.0, 1.0).unwrap();
        assert_abs_diff_eq!(c.c1, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.c2, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.c3, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn coeffs_known_value() {
        let c = LinearSchedule.ddim_coeffs(0.5, 0.25).unwrap();
        assert_abs_diff_eq!(c.c1, 0.16666666666666666, epsilon = 1e-12);
        assert_abs_diff_eq!(c.c2, 0.6666666666666666, epsilon = 1e-12);
        assert_abs_diff_eq!(c.c3, 0.05555555555555555, epsilon = 1e-12);
    }

    #[test]
    fn marginal_consistency_identities() {
        // c1 alpha_t + c2 = alpha_{t-dt} and c1^2 sigma_t^2 + c3 = sigma_{t-dt}^2.
        let s = LinearSchedule;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let t: f64 = rng.gen_range(1e-6..=1.0);
            let dt: f64 = rng.gen_range(0.0..t).max(t * 1e-6);
            let c = s.ddim_coeffs(t, dt).unwrap();
            let prev = t - dt;
            assert_abs_diff_eq!(c.c1 * s.alpha(t) + c.c2, s.alpha(prev), epsilon = 1e-12);
            assert_abs_diff_eq!(
                c.c1 * c.c1 * s.sigma(t).powi(2) + c.c3,
                s.sigma(prev).powi(2),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn diffuse_boundaries() {
        let s = LinearSchedule;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = [0.3, -1.2];
        let same = s.forward_diffuse(&x0, 0.0, &mut rng);
        assert_eq!(same, vec![0.3, -1.2]);

        // t = 1: standard normal moments over many draws.
        let n = 200_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let v = s.forward_diffuse(&x0, 1.0, &mut rng)[0];
            sum += v;
            sum2 += v * v;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        let se = (1.0 / n as f64).sqrt();
        assert!(mean.abs() < 5.0 * se, "mean {mean} too far from 0");
        assert!((var - 1.0).abs() < 5.0 * (2.0 / n as f64).sqrt(), "var {var} too far from 1");
    }

    #[test]
    fn two_stage_marginal_matches_direct() {
        let s = LinearSchedule;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = [0.8];
        let (t, dt) = (0.7, 0.3);
        let n = 400_000;
        let (mut m1, mut v1, mut m2, mut v2) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let a = s.forward_diffuse(&x0, t, &mut rng)[0];
            m1 += a;
            v1 += a * a;
            let prev = s.forward_diffuse(&x0, t - dt, &mut rng);
            let b = s.forward_transition(&prev, t, dt, &mut rng).unwrap()[0];
            m2 += b;
            v2 += b * b;
        }
        let n = n as f64;
        let (m1, m2) = (m1 / n, m2 / n);
        let (v1, v2) = (v1 / n - m1 * m1, v2 / n - m2 * m2);
        let se_mean = (v1.max(v2) / n).sqrt();
        let se_var = (2.0 / n).sqrt() * v1.max(v2);
        assert!((m1 - m2).abs() < 5.0 * 1.5 * se_mean, "means {m1} vs {m2}");
        assert!((v1 - v2).abs() < 5.0 * 1.5 * se_var, "vars {v1} vs {v2}");
    }
}
