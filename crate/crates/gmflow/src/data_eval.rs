//! Toy datasets (checkerboard, a 2D Gaussian-mixture target, blob images),
//! histogram accumulation, and the distance metrics used to score sample
//! batches.

use rand::Rng;
use statrs::function::erf::erf;

use crate::error::{GmError, Result};
use crate::gm::IsoGaussianMixture;
use crate::net::{GmMlp, HeadKind};
use crate::par;
use crate::schedule::LinearSchedule;
use crate::spectral::{PixelwiseGm, SpectrumHead};

/// The 2D checkerboard law: extent [-4,4]^2, a 4x4 grid of side-2 cells,
/// active where (i + j) is even, uniform density 1/32 on the 8 active cells.
#[derive(Debug, Clone, Copy, Default)]
pub struct CheckerboardSpec;

pub const CHECKER_EXTENT: f64 = 4.0;
const CELL: f64 = 2.0;
const DENSITY: f64 = 1.0 / 32.0;

impl CheckerboardSpec {
    pub fn cell_active(i: usize, j: usize) -> bool {
        (i + j) % 2 == 0
    }

    /// Exact density at a point (piecewise constant, half-open cells).
    pub fn density(&self, p: &[f64]) -> f64 {
        let (x, y) = (p[0], p[1]);
        if !(-CHECKER_EXTENT..CHECKER_EXTENT).contains(&x)
            || !(-CHECKER_EXTENT..CHECKER_EXTENT).contains(&y)
        {
            return 0.0;
        }
        let i = ((x + CHECKER_EXTENT) / CELL) as usize;
        let j = ((y + CHECKER_EXTENT) / CELL) as usize;
        if Self::cell_active(i.min(3), j.min(3)) {
            DENSITY
        } else {
            0.0
        }
    }

    pub fn on_support(&self, p: &[f64]) -> bool {
        self.density(p) > 0.0
    }

    /// Class of a point for the two-class conditional variant: 0 for the
    /// left half (x < 0), 1 for the right half.
    pub fn class_of(&self, p: &[f64]) -> usize {
        usize::from(p[0] >= 0.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let cell = ACTIVE_CELLS[rng.gen_range(0..ACTIVE_CELLS.len())];
        self.sample_in_cell(cell.0, cell.1, rng)
    }

    /// Uniform draw from the active cells of one class half.
    pub fn sample_class<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> [f64; 2] {
        let half: Vec<(usize, usize)> = ACTIVE_CELLS
            .iter()
            .copied()
            .filter(|&(i, _)| if class == 0 { i < 2 } else { i >= 2 })
            .collect();
        let cell = half[rng.gen_range(0..half.len())];
        self.sample_in_cell(cell.0, cell.1, rng)
    }

    fn sample_in_cell<R: Rng + ?Sized>(&self, i: usize, j: usize, rng: &mut R) -> [f64; 2] {
        let x = -CHECKER_EXTENT + CELL * i as f64 + rng.gen::<f64>() * CELL;
        let y = -CHECKER_EXTENT + CELL * j as f64 + rng.gen::<f64>() * CELL;
        [x, y]
    }

    /// Exact per-bin masses on a B x B grid over the extent (rectangle
    /// overlap with each active cell, so bins need not align with cells).
    pub fn exact_histogram(&self, bins: usize) -> Histogram2D {
        let w = 2.0 * CHECKER_EXTENT / bins as f64;
        let mut mass = vec![0.0; bins * bins];
        for bx in 0..bins {
            let x0 = -CHECKER_EXTENT + bx as f64 * w;
            for by in 0..bins {
                let y0 = -CHECKER_EXTENT + by as f64 * w;
                let mut m = 0.0;
                for &(i, j) in ACTIVE_CELLS.iter() {
                    let cx0 = -CHECKER_EXTENT + CELL * i as f64;
                    let cy0 = -CHECKER_EXTENT + CELL * j as f64;
                    let ox = overlap(x0, x0 + w, cx0, cx0 + CELL);
                    if ox > 0.0 {
                        m += ox * overlap(y0, y0 + w, cy0, cy0 + CELL) * DENSITY;
                    }
                }
                mass[bx * bins + by] = m;
            }
        }
        Histogram2D { bins, mass, outlier: 0.0 }
    }
}

/// The 8 active cells of the 4x4 grid ((i + j) even).
const ACTIVE_CELLS: [(usize, usize); 8] =
    [(0, 0), (0, 2), (1, 1), (1, 3), (2, 0), (2, 2), (3, 1), (3, 3)];

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Normalized 2D histogram over [-4,4]^2. In-range mass plus the tracked
/// outlier mass sums to 1.
#[derive(Debug, Clone)]
pub struct Histogram2D {
    pub bins: usize,
    /// Row-major (x-bin major) normalized masses.
    pub mass: Vec<f64>,
    pub outlier: f64,
}

impl Histogram2D {
    /// Accumulates sample points (flat `[n][2]`). Counting is chunked and
    /// merged in chunk order, so results do not depend on thread count.
    pub fn from_samples(samples: &[f64], bins: usize) -> Self {
        assert!(samples.len() % 2 == 0);
        let n = samples.len() / 2;
        let w = 2.0 * CHECKER_EXTENT / bins as f64;
        let (counts, out) = par::chunked_reduce(
            n,
            1 << 16,
            |range| {
                let mut counts = vec![0u64; bins * bins];
                let mut out = 0u64;
                for i in range {
                    let (x, y) = (samples[2 * i], samples[2 * i + 1]);
                    if (-CHECKER_EXTENT..CHECKER_EXTENT).contains(&x)
                        && (-CHECKER_EXTENT..CHECKER_EXTENT).contains(&y)
                    {
                        let bx = (((x + CHECKER_EXTENT) / w) as usize).min(bins - 1);
                        let by = (((y + CHECKER_EXTENT) / w) as usize).min(bins - 1);
                        counts[bx * bins + by] += 1;
                    } else {
                        out += 1;
                    }
                }
                (counts, out)
            },
            |(mut c1, o1), (c2, o2)| {
                for (a, b) in c1.iter_mut().zip(&c2) {
                    *a += b;
                }
                (c1, o1 + o2)
            },
        )
        .unwrap_or((vec![0; bins * bins], 0));
        let total = n.max(1) as f64;
        Histogram2D {
            bins,
            mass: counts.iter().map(|&c| c as f64 / total).collect(),
            outlier: out as f64 / total,
        }
    }

    /// Writes the grid as CSV, one row per x-bin.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut s = String::new();
        for bx in 0..self.bins {
            let row: Vec<String> = (0..self.bins)
                .map(|by| format!("{}", self.mass[bx * self.bins + by]))
                .collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        std::fs::write(path, s)?;
        Ok(())
    }

    /// Writes a P6 PPM heatmap with an embedded 256-entry palette.
    pub fn write_ppm(&self, path: &std::path::Path) -> Result<()> {
        let peak = self.mass.iter().cloned().fold(0.0, f64::max).max(1e-300);
        let pal = viridis_palette();
        let mut buf = format!("P6\n{} {}\n255\n", self.bins, self.bins).into_bytes();
        // Image rows run top-to-bottom = decreasing y.
        for by in (0..self.bins).rev() {
            for bx in 0..self.bins {
                let v = (self.mass[bx * self.bins + by] / peak).clamp(0.0, 1.0);
                let idx = (v * 255.0).round() as usize;
                buf.extend_from_slice(&pal[idx]);
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }
}

/// Total variation distance between two histograms on identical binning:
/// half the L1 difference of in-range masses plus half the outlier gap.
pub fn tv_distance(h1: &Histogram2D, h2: &Histogram2D) -> Result<f64> {
    if h1.bins != h2.bins {
        return Err(GmError::BinMismatch(format!("{} vs {}", h1.bins, h2.bins)));
    }
    let l1: f64 = h1.mass.iter().zip(&h2.mass).map(|(a, b)| (a - b).abs()).sum();
    Ok(0.5 * l1 + 0.5 * (h1.outlier - h2.outlier).abs())
}

/// 1D counterpart used by the solver-exactness oracles.
#[derive(Debug, Clone)]
pub struct Histogram1D {
    pub lo: f64,
    pub hi: f64,
    pub mass: Vec<f64>,
    pub outlier: f64,
}

impl Histogram1D {
    pub fn from_samples(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let w = (hi - lo) / bins as f64;
        let mut mass = vec![0.0; bins];
        let mut out = 0u64;
        for &x in samples {
            if x >= lo && x < hi {
                let b = (((x - lo) / w) as usize).min(bins - 1);
                mass[b] += 1.0;
            } else {
                out += 1;
            }
        }
        let total = samples.len().max(1) as f64;
        for m in &mut mass {
            *m /= total;
        }
        Histogram1D { lo, hi, mass, outlier: out as f64 / total }
    }

    /// Exact per-bin masses of a shared-std 1D mixture via Gaussian CDFs.
    pub fn from_gm(gm: &IsoGaussianMixture, lo: f64, hi: f64, bins: usize) -> Self {
        assert_eq!(gm.dim(), 1);
        let w = (hi - lo) / bins as f64;
        let weights = gm.weights();
        let cdf = |x: f64| -> f64 {
            let mut c = 0.0;
            for k in 0..gm.k() {
                let z = (x - gm.mean_of(k)[0]) / (gm.std() * std::f64::consts::SQRT_2);
                c += weights[k] * 0.5 * (1.0 + erf(z));
            }
            c
        };
        let mass: Vec<f64> =
            (0..bins).map(|b| cdf(lo + (b as f64 + 1.0) * w) - cdf(lo + b as f64 * w)).collect();
        let outlier = 1.0 - (cdf(hi) - cdf(lo));
        Histogram1D { lo, hi, mass, outlier: outlier.max(0.0) }
    }

    pub fn tv(&self, other: &Self) -> Result<f64> {
        if self.mass.len() != other.mass.len() || self.lo != other.lo || self.hi != other.hi {
            return Err(GmError::BinMismatch("1D histogram ranges differ".into()));
        }
        let l1: f64 = self.mass.iter().zip(&other.mass).map(|(a, b)| (a - b).abs()).sum();
        Ok(0.5 * l1 + 0.5 * (self.outlier - other.outlier).abs())
    }
}

/// Fraction of sample mass off the checkerboard support.
pub fn outlier_mass(samples: &[f64], spec: &CheckerboardSpec) -> f64 {
    assert!(samples.len() % 2 == 0);
    let n = samples.len() / 2;
    if n == 0 {
        return 0.0;
    }
    let off = par::chunked_reduce(
        n,
        1 << 16,
        |range| range.filter(|&i| !spec.on_support(&samples[2 * i..2 * i + 2])).count(),
        |a, b| a + b,
    )
    .unwrap_or(0);
    off as f64 / n as f64
}

/// Measures the Monte-Carlo TV noise floor at the given binning: the TV
/// distance between two independent ground-truth sample sets.
pub fn tv_noise_floor(n: usize, bins: usize, seed: u64) -> f64 {
    use rand::SeedableRng;
    let spec = CheckerboardSpec;
    let draw = |s: u64| -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(s);
        let mut v = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let p = spec.sample(&mut rng);
            v.extend_from_slice(&p);
        }
        v
    };
    let h1 = Histogram2D::from_samples(&draw(seed), bins);
    let h2 = Histogram2D::from_samples(&draw(seed ^ 0x9e3779b97f4a7c15), bins);
    tv_distance(&h1, &h2).expect("same binning")
}

// ---- datasets -------------------------------------------------------------

/// Identifies one of the built-in toy data laws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dataset {
    Checkerboard,
    /// Two-class checkerboard (left/right half of the support).
    CheckerboardCond,
    /// Four-mode 2D Gaussian mixture.
    Gm2d,
    /// 16x16 single-channel two-blob images.
    Blobs16,
}

impl Dataset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "checkerboard" => Ok(Self::Checkerboard),
            "checkerboard-cond" => Ok(Self::CheckerboardCond),
            "gm2d" => Ok(Self::Gm2d),
            "blobs16" => Ok(Self::Blobs16),
            other => Err(GmError::Format(format!(
                "unknown dataset {other:?} (expected checkerboard, checkerboard-cond, gm2d, blobs16)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Checkerboard => "checkerboard",
            Self::CheckerboardCond => "checkerboard-cond",
            Self::Gm2d => "gm2d",
            Self::Blobs16 => "blobs16",
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Self::CheckerboardCond => 2,
            _ => 0,
        }
    }

    pub fn data_dim(&self) -> usize {
        match self {
            Self::Blobs16 => 1, // per-pixel scalar; images are 16x16 grids
            _ => 2,
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, Self::Blobs16)
    }

    /// Draws one point sample and its class label (if conditional).
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Option<usize>) {
        match self {
            Self::Checkerboard => (CheckerboardSpec.sample(rng).to_vec(), None),
            Self::CheckerboardCond => {
                let class = rng.gen_range(0..2usize);
                (CheckerboardSpec.sample_class(class, rng).to_vec(), Some(class))
            }
            Self::Gm2d => (gm2d_target().sample(rng), None),
            Self::Blobs16 => panic!("blobs16 is an image dataset"),
        }
    }
}

/// The fixed 2D GM target: four modes at (+-2, +-2), shared std 0.5,
/// uneven weights.
pub fn gm2d_target() -> IsoGaussianMixture {
    IsoGaussianMixture::new(
        vec![0.4f64.ln(), 0.3f64.ln(), 0.2f64.ln(), 0.1f64.ln()],
        vec![2.0, 2.0, -2.0, 2.0, -2.0, -2.0, 2.0, -2.0],
        0.5,
        2,
    )
    .expect("static mixture")
}

pub const BLOB_GRID: usize = 16;

/// One 16x16 two-blob image: fixed contrast, random blob centers.
pub fn blob_image<R: Rng + ?Sized>(rng: &mut R) -> Vec<f64> {
    let mut img = vec![0.0; BLOB_GRID * BLOB_GRID];
    for _ in 0..2 {
        let cx = rng.gen_range(2.0..(BLOB_GRID as f64 - 3.0));
        let cy = rng.gen_range(2.0..(BLOB_GRID as f64 - 3.0));
        let sigma = 1.5;
        for i in 0..BLOB_GRID {
            for j in 0..BLOB_GRID {
                let d2 = (i as f64 - cx).powi(2) + (j as f64 - cy).powi(2);
                img[i * BLOB_GRID + j] += (-(d2) / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    img
}

/// Serializes a single-channel image as 16-bit binary PGM (P5), mapping
/// [0, peak] to [0, 65535].
pub fn write_pgm16(img: &[f64], width: usize, height: usize, path: &std::path::Path) -> Result<()> {
    assert_eq!(img.len(), width * height);
    let peak = img.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let mut buf = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in img {
        let q = ((v / peak).clamp(0.0, 1.0) * 65535.0).round() as u16;
        buf.extend_from_slice(&q.to_be_bytes()); // PGM 16-bit is big-endian
    }
    std::fs::write(path, buf)?;
    Ok(())
}

// ---- model NLL ------------------------------------------------------------

/// Time-averaged negative log-likelihood in bits per dimension:
/// (1/D) E[-log2 q(x0 | x_t)] with t ~ U(0,1). For image data the factorized
/// per-pixel density is used; passing a spectrum head switches to the
/// spectrum-enhanced density.
pub fn nll_bits_per_dim<R: Rng + ?Sized>(
    model: &GmMlp,
    dataset: Dataset,
    n: usize,
    spectrum: Option<&SpectrumHead>,
    rng: &mut R,
) -> Result<f64> {
    assert_eq!(model.cfg.head, HeadKind::Gm, "NLL needs a GM head");
    let sched = LinearSchedule;
    let mut total = 0.0;
    for _ in 0..n {
        let t: f64 = rng.gen_range(1e-4..1.0);
        if dataset.is_image() {
            let img = blob_image(rng);
            let x_t = sched.forward_diffuse(&img, t, rng);
            let pix = PixelwiseGm::from_model(model, &x_t, t, BLOB_GRID, BLOB_GRID)?;
            let d = img.len() as f64;
            let log_p = match spectrum {
                None => pix.factorized_log_pdf(&img),
                Some(head) => {
                    crate::spectral::spectral_log_pdf(&img, &pix, &head.spectrum(&pix))?
                }
            };
            total += -log_p / std::f64::consts::LN_2 / d;
        } else {
            let (x0, cond) = dataset.sample_point(rng);
            let x_t = sched.forward_diffuse(&x0, t, rng);
            let gm_x0 = model.forward(&x_t, t, cond).to_x0_space(&x_t, sched.sigma(t))?;
            let d = x0.len() as f64;
            total += -gm_x0.log_pdf(&x0) / std::f64::consts::LN_2 / d;
        }
    }
    Ok(total / n.max(1) as f64)
}

fn viridis_palette() -> Vec<[u8; 3]> {
    // Piecewise-linear ramp through viridis-like anchors.
    const ANCHORS: [[f64; 3]; 9] = [
        [68.0, 1.0, 84.0],
        [72.0, 40.0, 120.0],
        [62.0, 74.0, 137.0],
        [49.0, 104.0, 142.0],
        [38.0, 130.0, 142.0],
        [31.0, 158.0, 137.0],
        [53.0, 183.0, 121.0],
        [109.0, 205.0, 89.0],
        [253.0, 231.0, 37.0],
    ];
    (0..256)
        .map(|i| {
            let pos = i as f64 / 255.0 * (ANCHORS.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(ANCHORS.len() - 1);
            let f = pos - lo as f64;
            let mut c = [0u8; 3];
            for ch in 0..3 {
                c[ch] = (ANCHORS[lo][ch] + f * (ANCHORS[hi][ch] - ANCHORS[lo][ch])).round() as u8;
            }
            c
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn density_cases() {
        let spec = CheckerboardSpec;
        // (0.5, 0.5) lies in cell (2, 2): active.
        assert_abs_diff_eq!(spec.density(&[0.5, 0.5]), 1.0 / 32.0, epsilon = 1e-15);
        // (0.5, -0.5) lies in cell (2, 1): inactive.
        assert_abs_diff_eq!(spec.density(&[0.5, -0.5]), 0.0, epsilon = 1e-15);
        assert_eq!(spec.density(&[5.0, 0.0]), 0.0);
    }

    #[test]
    fn density_integrates_to_one() {
        let spec = CheckerboardSpec;
        let n = 400;
        let w = 8.0 / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = -4.0 + (i as f64 + 0.5) * w;
                let y = -4.0 + (j as f64 + 0.5) * w;
                total += spec.density(&[x, y]) * w * w;
            }
        }
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn samples_on_support_and_centered() {
        let spec = CheckerboardSpec;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let (mut sx, mut sy) = (0.0, 0.0);
        for _ in 0..n {
            let p = spec.sample(&mut rng);
            assert!(spec.on_support(&p), "sample {p:?} off support");
            sx += p[0];
            sy += p[1];
        }
        // std of one coordinate is ~2.4; 5 sigma band on the MC mean.
        let se = 2.4 / (n as f64).sqrt();
        assert!((sx / n as f64).abs() < 5.0 * se);
        assert!((sy / n as f64).abs() < 5.0 * se);
    }

    #[test]
    fn class_sampling_respects_halves() {
        let spec = CheckerboardSpec;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let l = spec.sample_class(0, &mut rng);
            assert!(l[0] < 0.0);
            assert_eq!(spec.class_of(&l), 0);
            let r = spec.sample_class(1, &mut rng);
            assert!(r[0] >= 0.0);
            assert_eq!(spec.class_of(&r), 1);
        }
    }

    #[test]
    fn exact_histogram_total_mass_is_one() {
        for bins in [50, 64, 200] {
            let h = CheckerboardSpec.exact_histogram(bins);
            let total: f64 = h.mass.iter().sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn tv_identical_and_disjoint() {
        let h = CheckerboardSpec.exact_histogram(50);
        assert_abs_diff_eq!(tv_distance(&h, &h).unwrap(), 0.0, epsilon = 1e-15);

        let mut a = h.clone();
        let mut b = h.clone();
        // Shift all of b's mass to the outlier bucket: fully disjoint.
        for m in &mut b.mass {
            *m = 0.0;
        }
        b.outlier = 1.0;
        a.outlier = 0.0;
        assert_abs_diff_eq!(tv_distance(&a, &b).unwrap(), 1.0, epsilon = 1e-12);

        let other = CheckerboardSpec.exact_histogram(64);
        assert!(tv_distance(&h, &other).is_err());
    }

    #[test]
    fn tv_metric_properties_on_random_histograms() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let randh = |rng: &mut ChaCha8Rng| {
            let mut mass: Vec<f64> = (0..25).map(|_| rng.gen::<f64>()).collect();
            let sum: f64 = mass.iter().sum::<f64>() * 1.1; // leave some outlier mass
            for m in &mut mass {
                *m /= sum;
            }
            let outlier = 1.0 - mass.iter().sum::<f64>();
            Histogram2D { bins: 5, mass, outlier }
        };
        for _ in 0..50 {
            let (a, b, c) = (randh(&mut rng), randh(&mut rng), randh(&mut rng));
            let ab = tv_distance(&a, &b).unwrap();
            let ba = tv_distance(&b, &a).unwrap();
            assert_abs_diff_eq!(ab, ba, epsilon = 1e-15);
            assert!(ab >= 0.0 && ab <= 1.0 + 1e-12);
            let ac = tv_distance(&a, &c).unwrap();
            let cb = tv_distance(&c, &b).unwrap();
            assert!(ab <= ac + cb + 1e-12, "triangle inequality violated");
        }
    }

    #[test]
    fn tv_1d_matches_quadrature_for_shifted_normals() {
        // TV(N(0,1), N(0.1,1)) by quadrature vs the CDF-based histogram value
        // at fine binning.
        let g1 = IsoGaussianMixture::single(vec![0.0], 1.0).unwrap();
        let g2 = IsoGaussianMixture::single(vec![0.1], 1.0).unwrap();
        let h1 = Histogram1D::from_gm(&g1, -10.0, 10.0, 8000);
        let h2 = Histogram1D::from_gm(&g2, -10.0, 10.0, 8000);
        let tv = h1.tv(&h2).unwrap();
        let n = 200_000;
        let w = 20.0 / n as f64;
        let mut q = 0.0;
        for i in 0..n {
            let x = -10.0 + (i as f64 + 0.5) * w;
            q += (g1.log_pdf(&[x]).exp() - g2.log_pdf(&[x]).exp()).abs() * w;
        }
        q *= 0.5;
        assert!((tv - q).abs() < 1e-3, "tv {tv} vs quadrature {q}");
    }

    #[test]
    fn outlier_mass_cases() {
        let spec = CheckerboardSpec;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut on = Vec::new();
        for _ in 0..1000 {
            on.extend_from_slice(&spec.sample(&mut rng));
        }
        assert_eq!(outlier_mass(&on, &spec), 0.0);

        // Uniform over the full square: half the cells are inactive.
        let mut uni = Vec::new();
        for _ in 0..200_000 {
            uni.push(rng.gen_range(-4.0..4.0));
            uni.push(rng.gen_range(-4.0..4.0));
        }
        let om = outlier_mass(&uni, &spec);
        assert!((om - 0.5).abs() < 0.01, "outlier mass {om}");
    }

    #[test]
    fn histogram_accumulation_matches_exact_reference() {
        // 1e6 ground-truth samples vs the analytic histogram: TV sits at the
        // MC floor (~0.014 at 50x50 bins at this sample count).
        let spec = CheckerboardSpec;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 1_000_000;
        let mut samples = Vec::with_capacity(2 * n);
        for _ in 0..n {
            samples.extend_from_slice(&spec.sample(&mut rng));
        }
        let h = Histogram2D::from_samples(&samples, 50);
        let tv = tv_distance(&h, &spec.exact_histogram(50)).unwrap();
        assert!(tv < 0.05, "tv {tv}");
        assert!(tv > 0.005, "tv {tv} suspiciously small");
    }

    #[test]
    fn blob_images_have_fixed_shape_and_contrast() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = blob_image(&mut rng);
        assert_eq!(img.len(), 256);
        let peak = img.iter().cloned().fold(0.0, f64::max);
        assert!(peak > 0.8 && peak <= 2.1, "peak {peak}");
    }

    #[test]
    fn pgm_export_has_correct_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.pgm");
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let img = blob_image(&mut rng);
        write_pgm16(&img, 16, 16, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n16 16\n65535\n"));
        assert_eq!(bytes.len(), 15 + 2 * 256);
    }
}
