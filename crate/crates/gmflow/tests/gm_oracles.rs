//! Grid and Monte-Carlo oracle checks of the mixture algebra, plus property
//! tests of the invariants the solvers rely on.

use gmflow::gm::{
    conflate_gaussians, softmax, CanonicalGaussian, IsoGaussian, IsoGaussianMixture,
};
use gmflow::oracle::{grid_normalize_1d, mc_moments};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRID_BINS: usize = 4096;
const GRID_LO: f64 = -8.0;
const GRID_HI: f64 = 8.0;

fn pdf1(g: &IsoGaussian, x: f64) -> f64 {
    g.log_pdf(&[x]).exp()
}

#[test]
fn powered_conflation_matches_grid_product() {
    let g1 = IsoGaussian::new(vec![0.0], 1.0).unwrap();
    let g2 = IsoGaussian::new(vec![2.0], 1.0).unwrap();
    let out = conflate_gaussians(&g1, 1.0, &g2, 1.0).unwrap();
    assert!((out.mean[0] - 1.0).abs() < 1e-14);
    assert!((out.var - 0.5).abs() < 1e-14);

    let grid =
        grid_normalize_1d(|x| pdf1(&g1, x) * pdf1(&g2, x), GRID_LO, GRID_HI, GRID_BINS).unwrap();
    let err = grid.max_abs_diff(|x| pdf1(&out, x));
    assert!(err < 1e-6, "max abs pdf error {err}");
    assert!((grid.mean() - 1.0).abs() < 1e-6);
    assert!((grid.variance() - 0.5).abs() < 1e-6);
}

#[test]
fn negative_power_conflation_matches_grid_ratio() {
    // N(0,1)^1 * N(0,2)^-1 normalizes to N(0,2).
    let g1 = IsoGaussian::new(vec![0.0], 1.0).unwrap();
    let g2 = IsoGaussian::new(vec![0.0], 2.0).unwrap();
    let out = conflate_gaussians(&g1, 1.0, &g2, -1.0).unwrap();
    assert!((out.mean[0]).abs() < 1e-14);
    assert!((out.var - 2.0).abs() < 1e-14);

    let grid =
        grid_normalize_1d(|x| pdf1(&g1, x) / pdf1(&g2, x), GRID_LO, GRID_HI, GRID_BINS).unwrap();
    let err = grid.max_abs_diff(|x| pdf1(&out, x));
    assert!(err < 1e-6, "max abs pdf error {err}");
}

#[test]
fn mixture_conflation_matches_grid_product() {
    let gm =
        IsoGaussianMixture::new(vec![0.5f64.ln(), 0.5f64.ln()], vec![0.0, 2.0], 1.0, 1).unwrap();
    let g = IsoGaussian::new(vec![0.0], 1.0).unwrap();
    let out = gm.conflate_gaussian(&g).unwrap();
    let grid = grid_normalize_1d(
        |x| gm.log_pdf(&[x]).exp() * pdf1(&g, x),
        GRID_LO,
        GRID_HI,
        GRID_BINS,
    )
    .unwrap();
    let err = grid.max_abs_diff(|x| out.log_pdf(&[x]).exp());
    assert!(err < 1e-6, "max abs pdf error {err}");
}

#[test]
fn convolution_matches_ancestral_monte_carlo() {
    // x1 | x2 ~ N(1 + 0.5 x2, 0.04), x2 ~ {0.5/0.5 at -2/2, s = 1}.
    let gm = IsoGaussianMixture::new(vec![0.0, 0.0], vec![-2.0, 2.0], 1.0, 1).unwrap();
    let out = gm.convolve(0.5, &[1.0], 0.04).unwrap();
    // Analytic moments of the convolved mixture.
    let w = out.weights();
    let mean: f64 = (0..2).map(|k| w[k] * out.mean_of(k)[0]).sum();
    let var: f64 = (0..2)
        .map(|k| w[k] * (out.std().powi(2) + (out.mean_of(k)[0] - mean).powi(2)))
        .sum();

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let m = mc_moments(
        |r| {
            let x2 = gm.sample(r)[0];
            let eps: f64 = r.sample(rand_distr::StandardNormal);
            1.0 + 0.5 * x2 + 0.2 * eps
        },
        1_000_000,
        &mut rng,
    );
    assert!((m.mean - mean).abs() < 5.0 * m.mean_se, "mean {} vs {}", m.mean, mean);
    assert!((m.var - var).abs() < 5.0 * m.var_se, "var {} vs {}", m.var, var);
}

#[test]
fn surrogate_matches_monte_carlo_moments() {
    let cases = [
        // (logits, means, std, expected mean, expected var)
        (vec![0.5f64.ln(), 0.5f64.ln()], vec![-1.0, 1.0], 1e-6, 0.0, 1.0),
        (vec![0.75f64.ln(), 0.25f64.ln()], vec![0.0, 4.0], 1.0, 1.0, 4.0),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for (logits, means, std, want_mean, want_var) in cases {
        let gm = IsoGaussianMixture::new(logits, means, std, 1).unwrap();
        let s = gm.surrogate();
        assert!((s.mean[0] - want_mean).abs() < 1e-9);
        assert!((s.var - want_var).abs() < 1e-9);
        let m = mc_moments(|r| gm.sample(r)[0], 400_000, &mut rng);
        assert!((m.mean - s.mean[0]).abs() < 5.0 * m.mean_se);
        assert!((m.var - s.var).abs() < 5.0 * m.var_se);
    }
}

#[test]
fn sampling_moments_and_component_frequencies() {
    let gm = IsoGaussianMixture::new(vec![0.5f64.ln(), 0.5f64.ln()], vec![-1.0, 1.0], 0.1, 1)
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let n = 1_000_000;
    let mut sum = 0.0;
    let mut hi = 0usize;
    for _ in 0..n {
        let x = gm.sample(&mut rng)[0];
        sum += x;
        if x > 0.0 {
            hi += 1;
        }
    }
    // CLT bound on the mean (3 sigma with a fixed seed).
    let sigma_mean = ((1.0 + 0.01) / n as f64).sqrt();
    assert!((sum / n as f64).abs() < 3.0 * sigma_mean);
    // Component frequency within binomial 3 sigma (modes are 10 sigma apart,
    // so the sign identifies the component).
    let p = hi as f64 / n as f64;
    let sigma_p = (0.25 / n as f64).sqrt();
    assert!((p - 0.5).abs() < 3.0 * sigma_p, "frequency {p}");
}

#[test]
fn density_integrates_to_one_on_grid() {
    let gm = IsoGaussianMixture::new(vec![0.4, -0.6, 0.0], vec![-2.5, 0.5, 2.0], 0.8, 1).unwrap();
    let bins = 4096;
    let w = (GRID_HI - GRID_LO) / bins as f64;
    let mass: f64 = (0..bins)
        .map(|i| gm.log_pdf(&[GRID_LO + (i as f64 + 0.5) * w]).exp() * w)
        .sum();
    assert!((mass - 1.0).abs() < 1e-6, "grid mass {mass}");
}

#[test]
fn reparameterization_change_of_variables() {
    // log q_x0(x0) = log q_u((x_t - x0) / sigma_t) - D log sigma_t.
    let gm_u = IsoGaussianMixture::new(vec![0.3, -0.2], vec![0.4, -1.0, 0.9, 0.3], 0.7, 2).unwrap();
    let x_t = [0.5, -0.25];
    let sigma_t = 0.6;
    let gm_x0 = gm_u.to_x0_space(&x_t, sigma_t).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..100 {
        let x0 = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let u = [(x_t[0] - x0[0]) / sigma_t, (x_t[1] - x0[1]) / sigma_t];
        let lhs = gm_x0.log_pdf(&x0);
        let rhs = gm_u.log_pdf(&u) - 2.0 * sigma_t.ln();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Conflating with g then h equals conflating once with their canonical
    /// product (precisions and precision-means add).
    #[test]
    fn conflation_semigroup(
        logits in prop::collection::vec(-3.0f64..3.0, 1..5),
        mean_seed in -2.0f64..2.0,
        std in 0.3f64..2.0,
        gp1 in 0.2f64..3.0,
        gm1 in -2.0f64..2.0,
        gp2 in 0.2f64..3.0,
        gm2 in -2.0f64..2.0,
    ) {
        let k = logits.len();
        let means: Vec<f64> = (0..k).map(|i| mean_seed + i as f64 * 0.7).collect();
        let gm = IsoGaussianMixture::new(logits, means, std, 1).unwrap();
        let g = CanonicalGaussian::new(gp1, vec![gm1 * gp1]).unwrap();
        let h = CanonicalGaussian::new(gp2, vec![gm2 * gp2]).unwrap();
        let stepwise = gm.conflate_canonical(&g).unwrap().conflate_canonical(&h).unwrap();
        let combined = gm.conflate_canonical(&g.product(&h)).unwrap();
        prop_assert!((stepwise.std() - combined.std()).abs() < 1e-9);
        let (ws, wc) = (stepwise.weights(), combined.weights());
        for i in 0..k {
            prop_assert!((stepwise.mean_of(i)[0] - combined.mean_of(i)[0]).abs() < 1e-9);
            prop_assert!((ws[i] - wc[i]).abs() < 1e-9);
        }
    }

    /// softmax always normalizes, even for extreme logits.
    #[test]
    fn softmax_normalizes(logits in prop::collection::vec(-700.0f64..700.0, 1..8)) {
        let w = softmax(&logits);
        let sum: f64 = w.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
    }

    /// u -> x0 -> u round trip is the identity.
    #[test]
    fn reparam_round_trip(
        mean in -3.0f64..3.0,
        std in 0.05f64..2.0,
        x_t in -3.0f64..3.0,
        sigma_t in 0.01f64..1.0,
    ) {
        let gm = IsoGaussianMixture::new(vec![0.0], vec![mean], std, 1).unwrap();
        let back = gm.to_x0_space(&[x_t], sigma_t).unwrap().to_u_space(&[x_t], sigma_t).unwrap();
        prop_assert!((back.mean_of(0)[0] - mean).abs() < 1e-9);
        prop_assert!((back.std() - std).abs() < 1e-9);
    }
}
