//! Bicubic resampling (Catmull-Rom kernel, a = -0.5), separable, with
//! half-pixel center alignment and edge clamping. Downscaling widens the
//! kernel by the scale factor, the usual antialiased-resize convention.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};

/// Keys cubic with a = -0.5.
pub fn cubic_kernel(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Per-output-index taps (clamped source index, normalized weight).
fn axis_taps(in_n: usize, out_n: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = in_n as f64 / out_n as f64;
    // widen the kernel when shrinking
    let scale = ratio.max(1.0);
    let support = 2.0 * scale;
    (0..out_n)
        .map(|o| {
            let center = (o as f64 + 0.5) * ratio - 0.5;
            let lo = (center - support).ceil() as isize;
            let hi = (center + support).floor() as isize;
            let mut taps = Vec::with_capacity((hi - lo + 1) as usize);
            let mut total = 0.0;
            for i in lo..=hi {
                let w = cubic_kernel((i as f64 - center) / scale);
                if w != 0.0 {
                    let idx = i.clamp(0, in_n as isize - 1) as usize;
                    taps.push((idx, w));
                    total += w;
                }
            }
            for (_, w) in taps.iter_mut() {
                *w /= total;
            }
            taps
        })
        .collect()
}

/// Resize a [C, H, W] tensor to [C, out_h, out_w].
pub fn bicubic_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::invalid("bicubic_resize", format!("expected [C,H,W], got {s:?}")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bicubic_resize", "output dimensions must be positive"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);

    // rows first: [C, H, W] -> [C, H, out_w]
    let src = x.data();
    let mut mid = vec![0.0f64; c * h * out_w];
    for ch in 0..c {
        for y in 0..h {
            let row = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            let dst = &mut mid[(ch * h + y) * out_w..(ch * h + y + 1) * out_w];
            for (ox, taps) in tx.iter().enumerate() {
                let mut acc = 0.0;
                for &(i, wt) in taps {
                    acc += row[i].to_f64() * wt;
                }
                dst[ox] = acc;
            }
        }
    }
    // then columns: [C, H, out_w] -> [C, out_h, out_w]
    let mut out = vec![T::zero(); c * out_h * out_w];
    for ch in 0..c {
        for (oy, taps) in ty.iter().enumerate() {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for &(i, wt) in taps {
                    acc += mid[(ch * h + i) * out_w + ox] * wt;
                }
                out[(ch * out_h + oy) * out_w + ox] = T::from_f64(acc);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Initial HR depth estimate: upscale by an integer factor s >= 1.
pub fn bicubic_upsample<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    if s == 0 {
        return Err(Error::invalid("bicubic_upsample", "scale must be >= 1"));
    }
    if s == 1 {
        return Ok(x.clone());
    }
    let sh = x.shape();
    bicubic_resize(x, sh[1] * s, sh[2] * s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::init::{uniform, Rng64};
    use rand::SeedableRng;

    /// Non-separable direct evaluation of the same resampling, the oracle.
    fn direct_bicubic(x: &Tensor<f64>, out_h: usize, out_w: usize) -> Tensor<f64> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let ry = h as f64 / out_h as f64;
        let rx = w as f64 / out_w as f64;
        let (sy, sx) = (ry.max(1.0), rx.max(1.0));
        Tensor::from_fn(&[c, out_h, out_w], |flat| {
            let ch = flat / (out_h * out_w);
            let oy = (flat / out_w) % out_h;
            let ox = flat % out_w;
            let cy = (oy as f64 + 0.5) * ry - 0.5;
            let cx = (ox as f64 + 0.5) * rx - 0.5;
            let mut acc = 0.0;
            let mut total = 0.0;
            for iy in (cy - 2.0 * sy).ceil() as isize..=(cy + 2.0 * sy).floor() as isize {
                for ix in (cx - 2.0 * sx).ceil() as isize..=(cx + 2.0 * sx).floor() as isize {
                    let wy = cubic_kernel((iy as f64 - cy) / sy);
                    let wx = cubic_kernel((ix as f64 - cx) / sx);
                    let yy = iy.clamp(0, h as isize - 1) as usize;
                    let xx = ix.clamp(0, w as isize - 1) as usize;
                    acc += wy * wx * x.data()[(ch * h + yy) * w + xx];
                    total += wy * wx;
                }
            }
            acc / total
        })
    }

    #[test]
    fn scale_one_is_identity() {
        let mut rng = Rng64::seed_from_u64(1);
        let x = uniform::<f64>(&[2, 5, 7], -3.0, 3.0, &mut rng);
        let y = bicubic_upsample(&x, 1).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn constant_maps_stay_constant() {
        let x = Tensor::<f64>::full(&[1, 4, 4], 7.25);
        for s in [2usize, 4] {
            let y = bicubic_upsample(&x, s).unwrap();
            assert_eq!(y.shape(), &[1, 4 * s, 4 * s]);
            for &v in y.data() {
                assert!((v - 7.25).abs() < 1e-12);
            }
        }
        let down = bicubic_resize(&x, 2, 2).unwrap();
        for &v in down.data() {
            assert!((v - 7.25).abs() < 1e-12);
        }
    }

    #[test]
    fn ramp_upsample_matches_direct_oracle() {
        let x = Tensor::<f64>::from_fn(&[1, 8, 8], |i| (i % 8) as f64);
        let y = bicubic_upsample(&x, 2).unwrap();
        let oracle = direct_bicubic(&x, 16, 16);
        for i in 0..y.numel() {
            assert!((y.data()[i] - oracle.data()[i]).abs() < 1e-5, "at {i}");
        }
    }

    #[test]
    fn random_resizes_match_direct_oracle() {
        let mut rng = Rng64::seed_from_u64(2);
        let x = uniform::<f64>(&[2, 12, 8], -1.0, 1.0, &mut rng);
        for (oh, ow) in [(24, 16), (6, 4), (3, 2), (12, 8)] {
            let y = bicubic_resize(&x, oh, ow).unwrap();
            let oracle = direct_bicubic(&x, oh, ow);
            for i in 0..y.numel() {
                assert!((y.data()[i] - oracle.data()[i]).abs() < 1e-9, "{oh}x{ow} at {i}");
            }
        }
    }
}
