//! Iterative radix-2 FFT and the unnormalized 2-D forward DFT used by the
//! spectral loss. Sizes must be powers of two; the loss layer zero-pads.

use super::tensor::Scalar;
use crate::error::{Error, Result};

pub fn is_power_of_two(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

/// In-place radix-2 decimation-in-time FFT over interleaved (re, im) slices.
/// Forward transform, unnormalized: X[k] = sum_n x[n] exp(-2*pi*i*k*n/N).
fn fft_inplace<T: Scalar>(re: &mut [T], im: &mut [T]) {
    let n = re.len();
    debug_assert!(is_power_of_two(n));
    if n <= 1 {
        return;
    }
    // bit-reversal permutation
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * std::f64::consts::PI / len as f64;
        let (wr, wi) = (T::from_f64(ang.cos()), T::from_f64(ang.sin()));
        let half = len / 2;
        let mut start = 0;
        while start < n {
            let mut cr = T::one();
            let mut ci = T::zero();
            for k in 0..half {
                let (a, b) = (start + k, start + k + half);
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

/// 2-D forward DFT of a complex [H, W] field, rows then columns, in place.
pub fn fft2_complex<T: Scalar>(re: &mut [T], im: &mut [T], h: usize, w: usize) -> Result<()> {
    if !is_power_of_two(h) || !is_power_of_two(w) {
        return Err(Error::invalid("fft2", format!("dimensions must be powers of two, got {h}x{w}")));
    }
    if re.len() != h * w || im.len() != h * w {
        return Err(Error::ShapeMismatch { context: "fft2", expected: vec![h, w], got: vec![re.len()] });
    }
    for y in 0..h {
        fft_inplace(&mut re[y * w..(y + 1) * w], &mut im[y * w..(y + 1) * w]);
    }
    // columns via gather/scatter through a scratch buffer
    let mut cr = vec![T::zero(); h];
    let mut ci = vec![T::zero(); h];
    for x in 0..w {
        for y in 0..h {
            cr[y] = re[y * w + x];
            ci[y] = im[y * w + x];
        }
        fft_inplace(&mut cr, &mut ci);
        for y in 0..h {
            re[y * w + x] = cr[y];
            im[y * w + x] = ci[y];
        }
    }
    Ok(())
}

/// Forward 2-D DFT of a real [H, W] map. Returns (re, im).
pub fn fft2_real<T: Scalar>(x: &[T], h: usize, w: usize) -> Result<(Vec<T>, Vec<T>)> {
    let mut re = x.to_vec();
    let mut im = vec![T::zero(); x.len()];
    fft2_complex(&mut re, &mut im, h, w)?;
    Ok((re, im))
}

/// Adjoint of `fft2_real` for reverse-mode differentiation: given the loss
/// gradient w.r.t. (re, im), returns the gradient w.r.t. the real input.
/// Since the DFT is linear, this is Re(DFT(g_re - i*g_im)).
pub fn fft2_adjoint<T: Scalar>(g_re: &[T], g_im: &[T], h: usize, w: usize) -> Result<Vec<T>> {
    let mut re = g_re.to_vec();
    let mut im: Vec<T> = g_im.iter().map(|&v| -v).collect();
    fft2_complex(&mut re, &mut im, h, w)?;
    Ok(re)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct O(N^2) DFT used as the independent oracle.
    fn naive_dft2(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let mut re = vec![0.0; h * w];
        let mut im = vec![0.0; h * w];
        for ky in 0..h {
            for kx in 0..w {
                let (mut sr, mut si) = (0.0, 0.0);
                for ny in 0..h {
                    for nx in 0..w {
                        let ang = -2.0 * std::f64::consts::PI
                            * (ky as f64 * ny as f64 / h as f64 + kx as f64 * nx as f64 / w as f64);
                        sr += x[ny * w + nx] * ang.cos();
                        si += x[ny * w + nx] * ang.sin();
                    }
                }
                re[ky * w + kx] = sr;
                im[ky * w + kx] = si;
            }
        }
        (re, im)
    }

    #[test]
    fn constant_image_concentrates_in_dc() {
        let (h, w) = (8, 4);
        let c = 2.5f64;
        let (re, im) = fft2_real(&vec![c; h * w], h, w).unwrap();
        assert!((re[0] - c * (h * w) as f64).abs() < 1e-9);
        for i in 1..h * w {
            assert!(re[i].abs() < 1e-9 && im[i].abs() < 1e-9, "bin {i} not zero");
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let (h, w) = (4, 4);
        let mut x = vec![0.0f64; h * w];
        x[2 * w + 3] = 1.0;
        let (re, im) = fft2_real(&x, h, w).unwrap();
        for i in 0..h * w {
            let mag = (re[i] * re[i] + im[i] * im[i]).sqrt();
            assert!((mag - 1.0).abs() < 1e-9, "bin {i} magnitude {mag}");
        }
    }

    #[test]
    fn matches_naive_dft_on_random_input() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (h, w) = (8, 8);
            let x: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (re, im) = fft2_real(&x, h, w).unwrap();
            let (ore, oim) = naive_dft2(&x, h, w);
            for i in 0..h * w {
                assert!((re[i] - ore[i]).abs() < 1e-4, "re[{i}]: {} vs {}", re[i], ore[i]);
                assert!((im[i] - oim[i]).abs() < 1e-4, "im[{i}]: {} vs {}", im[i], oim[i]);
            }
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(fft2_real(&vec![0.0f64; 12], 3, 4).is_err());
    }

    #[test]
    fn adjoint_matches_inner_product_identity() {
        // <F(x), g> == <x, F*(g)> for the real-to-complex map
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (h, w) = (4, 8);
        let x: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gr: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gi: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (fr, fi) = fft2_real(&x, h, w).unwrap();
        let lhs: f64 = (0..h * w).map(|i| fr[i] * gr[i] + fi[i] * gi[i]).sum();
        let adj = fft2_adjoint(&gr, &gi, h, w).unwrap();
        let rhs: f64 = (0..h * w).map(|i| x[i] * adj[i]).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}
