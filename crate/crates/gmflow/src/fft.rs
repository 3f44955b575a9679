//! Iterative radix-2 complex FFT with orthonormal scaling, plus 2D wrappers
//! for the small power-of-two grids used by spectral sampling.

use crate::error::{GmError, Result};

fn is_pow2(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

/// In-place radix-2 decimation-in-time FFT over split re/im arrays.
/// Unscaled: callers apply their own normalization.
pub fn fft_inplace(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    assert_eq!(n, im.len());
    assert!(is_pow2(n), "fft length must be a power of two");
    if n <= 1 {
        return;
    }
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 0..n - 1 {
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
        let mut m = n >> 1;
        while m >= 1 && j & m != 0 {
            j ^= m;
            m >>= 1;
        }
        j |= m;
    }
    // Butterflies.
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        let mut start = 0;
        while start < n {
            let (mut cr, mut ci) = (1.0f64, 0.0f64);
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let tr = re[b] * cr - im[b] * ci;
                let ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
            start += len;
        }
        len <<= 1;
    }
}

/// Orthonormal 2D FFT of an H x W grid (row-major): rows then columns, with
/// a single 1/sqrt(HW) scale so forward and inverse are both isometries.
pub fn fft2d(re: &mut [f64], im: &mut [f64], h: usize, w: usize, inverse: bool) -> Result<()> {
    if re.len() != h * w || im.len() != h * w || !is_pow2(h) || !is_pow2(w) {
        return Err(GmError::BadShape(format!("fft2d needs power-of-two {h}x{w} grids")));
    }
    // Rows.
    for r in 0..h {
        fft_inplace(&mut re[r * w..(r + 1) * w], &mut im[r * w..(r + 1) * w], inverse);
    }
    // Columns via gather/scatter.
    let mut cre = vec![0.0; h];
    let mut cim = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            cre[r] = re[r * w + c];
            cim[r] = im[r * w + c];
        }
        fft_inplace(&mut cre, &mut cim, inverse);
        for r in 0..h {
            re[r * w + c] = cre[r];
            im[r * w + c] = cim[r];
        }
    }
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for v in re.iter_mut().chain(im.iter_mut()) {
        *v *= scale;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// O(n^2) reference DFT.
    fn naive_dft(re: &[f64], im: &[f64], inverse: bool) -> (Vec<f64>, Vec<f64>) {
        let n = re.len();
        let sign = if inverse { 1.0 } else { -1.0 };
        let mut or = vec![0.0; n];
        let mut oi = vec![0.0; n];
        for k in 0..n {
            for j in 0..n {
                let ang = sign * 2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
                or[k] += re[j] * ang.cos() - im[j] * ang.sin();
                oi[k] += re[j] * ang.sin() + im[j] * ang.cos();
            }
        }
        (or, oi)
    }

    #[test]
    fn matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [1usize, 2, 4, 16, 64] {
            let re0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let im0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (er, ei) = naive_dft(&re0, &im0, false);
            let (mut re, mut im) = (re0.clone(), im0.clone());
            fft_inplace(&mut re, &mut im, false);
            for i in 0..n {
                assert_abs_diff_eq!(re[i], er[i], epsilon = 1e-9);
                assert_abs_diff_eq!(im[i], ei[i], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn fft2d_round_trip_and_energy() {
        let (h, w) = (8, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let re0: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let im0 = vec![0.0; h * w];
        let (mut re, mut im) = (re0.clone(), im0.clone());
        fft2d(&mut re, &mut im, h, w, false).unwrap();
        // Orthonormal: energy preserved.
        let e_in: f64 = re0.iter().map(|v| v * v).sum();
        let e_out: f64 = re.iter().zip(&im).map(|(r, i)| r * r + i * i).sum();
        assert_abs_diff_eq!(e_in, e_out, epsilon = 1e-9);
        fft2d(&mut re, &mut im, h, w, true).unwrap();
        for i in 0..h * w {
            assert_abs_diff_eq!(re[i], re0[i], epsilon = 1e-12);
            assert_abs_diff_eq!(im[i], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut re = vec![0.0; 12];
        let mut im = vec![0.0; 12];
        assert!(fft2d(&mut re, &mut im, 3, 4, false).is_err());
    }
}
