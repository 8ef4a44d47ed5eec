//! Forward and backward kernels for the structured primitives (linear,
//! layer norm, convolutions, resampling, padding). Kernels operate on raw
//! slices; shape validation happens at the tape layer.

use super::tensor::Scalar;
use rayon::prelude::*;

/// Work below this many output elements is not worth a rayon dispatch.
const PAR_THRESHOLD: usize = 8192;

// ---------------------------------------------------------------------------
// linear over the last axis
// ---------------------------------------------------------------------------

/// y[r, co] = b[co] + sum_ci x[r, ci] * w[co, ci]
pub fn linear_fwd<T: Scalar>(x: &[T], w: &[T], b: &[T], rows: usize, cin: usize, cout: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cout];
    let body = |r: usize, row_out: &mut [T]| {
        let xr = &x[r * cin..(r + 1) * cin];
        for co in 0..cout {
            let wr = &w[co * cin..(co + 1) * cin];
            let mut acc = b[co];
            for ci in 0..cin {
                acc += xr[ci] * wr[ci];
            }
            row_out[co] = acc;
        }
    };
    if rows * cout * cin >= PAR_THRESHOLD {
        out.par_chunks_mut(cout).enumerate().for_each(|(r, chunk)| body(r, chunk));
    } else {
        for (r, chunk) in out.chunks_mut(cout).enumerate() {
            body(r, chunk);
        }
    }
    out
}

/// Returns (dx, dw, db).
pub fn linear_bwd<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &[T],
    rows: usize,
    cin: usize,
    cout: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); rows * cin];
    let dx_body = |r: usize, row_dx: &mut [T]| {
        let gr = &g[r * cout..(r + 1) * cout];
        for co in 0..cout {
            let gv = gr[co];
            let wr = &w[co * cin..(co + 1) * cin];
            for ci in 0..cin {
                row_dx[ci] += gv * wr[ci];
            }
        }
    };
    if rows * cout * cin >= PAR_THRESHOLD {
        dx.par_chunks_mut(cin).enumerate().for_each(|(r, chunk)| dx_body(r, chunk));
    } else {
        for (r, chunk) in dx.chunks_mut(cin).enumerate() {
            dx_body(r, chunk);
        }
    }

    let mut dw = vec![T::zero(); cout * cin];
    let dw_body = |co: usize, row_dw: &mut [T]| {
        for r in 0..rows {
            let gv = g[r * cout + co];
            let xr = &x[r * cin..(r + 1) * cin];
            for ci in 0..cin {
                row_dw[ci] += gv * xr[ci];
            }
        }
    };
    if rows * cout * cin >= PAR_THRESHOLD {
        dw.par_chunks_mut(cin).enumerate().for_each(|(co, chunk)| dw_body(co, chunk));
    } else {
        for (co, chunk) in dw.chunks_mut(cin).enumerate() {
            dw_body(co, chunk);
        }
    }

    let mut db = vec![T::zero(); cout];
    for r in 0..rows {
        for co in 0..cout {
            db[co] += g[r * cout + co];
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// layer norm over the last axis
// ---------------------------------------------------------------------------

/// Per-row mean/variance normalization followed by the gamma/beta affine.
/// Returns (y, mean, rstd) with mean/rstd one entry per row.
pub fn layer_norm_fwd<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    rows: usize,
    c: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); rows * c];
    let mut mean = vec![T::zero(); rows];
    let mut rstd = vec![T::zero(); rows];
    let cn = T::from_usize(c).unwrap();
    for r in 0..rows {
        let xr = &x[r * c..(r + 1) * c];
        let mut mu = T::zero();
        for &v in xr {
            mu += v;
        }
        mu /= cn;
        let mut var = T::zero();
        for &v in xr {
            let d = v - mu;
            var += d * d;
        }
        var /= cn;
        let rs = (var + eps).sqrt().recip();
        mean[r] = mu;
        rstd[r] = rs;
        let yr = &mut y[r * c..(r + 1) * c];
        for i in 0..c {
            yr[i] = (xr[i] - mu) * rs * gamma[i] + beta[i];
        }
    }
    (y, mean, rstd)
}

/// Returns (dx, dgamma, dbeta).
pub fn layer_norm_bwd<T: Scalar>(
    x: &[T],
    gamma: &[T],
    mean: &[T],
    rstd: &[T],
    g: &[T],
    rows: usize,
    c: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); rows * c];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let cn = T::from_usize(c).unwrap();
    for r in 0..rows {
        let xr = &x[r * c..(r + 1) * c];
        let gr = &g[r * c..(r + 1) * c];
        let mu = mean[r];
        let rs = rstd[r];
        // dxhat, plus the two row means needed by the closed-form expression
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for i in 0..c {
            let xhat = (xr[i] - mu) * rs;
            let dxhat = gr[i] * gamma[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgamma[i] += gr[i] * xhat;
            dbeta[i] += gr[i];
        }
        let m_dxhat = sum_dxhat / cn;
        let m_dxhat_xhat = sum_dxhat_xhat / cn;
        let dxr = &mut dx[r * c..(r + 1) * c];
        for i in 0..c {
            let xhat = (xr[i] - mu) * rs;
            let dxhat = gr[i] * gamma[i];
            dxr[i] = rs * (dxhat - m_dxhat - xhat * m_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// dense 2-D convolution (cross-correlation), input layout [Cin, H, W]
// ---------------------------------------------------------------------------

pub fn conv2d_out_dim(h: usize, pad: usize, kh: usize, stride: usize) -> usize {
    (h + 2 * pad - kh) / stride + 1
}

pub fn conv2d_fwd<T: Scalar>(
    x: &[T],
    k: &[T],
    b: Option<&[T]>,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let oh = conv2d_out_dim(h, pad, kh, stride);
    let ow = conv2d_out_dim(w, pad, kw, stride);
    let mut out = vec![T::zero(); cout * oh * ow];
    let body = |co: usize, chunk: &mut [T]| {
        let bias = b.map_or(T::zero(), |b| b[co]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias;
                for ci in 0..cin {
                    let kbase = ((co * cin + ci) * kh) * kw;
                    let xbase = ci * h * w;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * w;
                        let krow = kbase + ky * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x[xrow + ix as usize] * k[krow + kx];
                        }
                    }
                }
                chunk[oy * ow + ox] = acc;
            }
        }
    };
    if cout * oh * ow * cin * kh * kw >= PAR_THRESHOLD {
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(co, chunk)| body(co, chunk));
    } else {
        for (co, chunk) in out.chunks_mut(oh * ow).enumerate() {
            body(co, chunk);
        }
    }
    out
}

/// Returns (dx, dk, db).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd<T: Scalar>(
    x: &[T],
    k: &[T],
    g: &[T],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let oh = conv2d_out_dim(h, pad, kh, stride);
    let ow = conv2d_out_dim(w, pad, kw, stride);

    let mut dx = vec![T::zero(); cin * h * w];
    let dx_body = |ci: usize, chunk: &mut [T]| {
        for co in 0..cout {
            let gbase = co * oh * ow;
            let kbase = ((co * cin + ci) * kh) * kw;
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g[gbase + oy * ow + ox];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            chunk[iy as usize * w + ix as usize] += gv * k[kbase + ky * kw + kx];
                        }
                    }
                }
            }
        }
    };
    if cin * h * w * cout >= PAR_THRESHOLD {
        dx.par_chunks_mut(h * w).enumerate().for_each(|(ci, chunk)| dx_body(ci, chunk));
    } else {
        for (ci, chunk) in dx.chunks_mut(h * w).enumerate() {
            dx_body(ci, chunk);
        }
    }

    let mut dk = vec![T::zero(); cout * cin * kh * kw];
    let dk_body = |co: usize, chunk: &mut [T]| {
        let gbase = co * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[gbase + oy * ow + ox];
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            chunk[(ci * kh + ky) * kw + kx] += gv * x[ci * h * w + iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
    };
    if cout * cin * kh * kw * oh * ow >= PAR_THRESHOLD {
        dk.par_chunks_mut(cin * kh * kw).enumerate().for_each(|(co, chunk)| dk_body(co, chunk));
    } else {
        for (co, chunk) in dk.chunks_mut(cin * kh * kw).enumerate() {
            dk_body(co, chunk);
        }
    }

    let mut db = vec![T::zero(); cout];
    for co in 0..cout {
        let mut acc = T::zero();
        for &gv in &g[co * oh * ow..(co + 1) * oh * ow] {
            acc += gv;
        }
        db[co] = acc;
    }
    (dx, dk, db)
}

// ---------------------------------------------------------------------------
// depthwise 2-D convolution, stride 1, kernel layout [C, 1, kh, kw]
// ---------------------------------------------------------------------------

pub fn dwconv2d_fwd<T: Scalar>(
    x: &[T],
    k: &[T],
    b: Option<&[T]>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) -> Vec<T> {
    let oh = conv2d_out_dim(h, pad, kh, 1);
    let ow = conv2d_out_dim(w, pad, kw, 1);
    let mut out = vec![T::zero(); c * oh * ow];
    let body = |ch: usize, chunk: &mut [T]| {
        let bias = b.map_or(T::zero(), |b| b[ch]);
        let xbase = ch * h * w;
        let kbase = ch * kh * kw;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias;
                for ky in 0..kh {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc += x[xbase + iy as usize * w + ix as usize] * k[kbase + ky * kw + kx];
                    }
                }
                chunk[oy * ow + ox] = acc;
            }
        }
    };
    if c * oh * ow * kh * kw >= PAR_THRESHOLD {
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(ch, chunk)| body(ch, chunk));
    } else {
        for (ch, chunk) in out.chunks_mut(oh * ow).enumerate() {
            body(ch, chunk);
        }
    }
    out
}

/// Returns (dx, dk, db).
pub fn dwconv2d_bwd<T: Scalar>(
    x: &[T],
    k: &[T],
    g: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let oh = conv2d_out_dim(h, pad, kh, 1);
    let ow = conv2d_out_dim(w, pad, kw, 1);
    let mut dx = vec![T::zero(); c * h * w];
    let mut dk = vec![T::zero(); c * kh * kw];
    let mut db = vec![T::zero(); c];

    let body = |ch: usize, dxc: &mut [T], dkc: &mut [T], dbc: &mut T| {
        let xbase = ch * h * w;
        let kbase = ch * kh * kw;
        let gbase = ch * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[gbase + oy * ow + ox];
                *dbc += gv;
                for ky in 0..kh {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xi = iy as usize * w + ix as usize;
                        dxc[xi] += gv * k[kbase + ky * kw + kx];
                        dkc[ky * kw + kx] += gv * x[xbase + xi];
                    }
                }
            }
        }
    };
    if c * oh * ow * kh * kw >= PAR_THRESHOLD {
        dx.par_chunks_mut(h * w)
            .zip(dk.par_chunks_mut(kh * kw))
            .zip(db.par_iter_mut())
            .enumerate()
            .for_each(|(ch, ((dxc, dkc), dbc))| body(ch, dxc, dkc, dbc));
    } else {
        for (ch, ((dxc, dkc), dbc)) in dx.chunks_mut(h * w).zip(dk.chunks_mut(kh * kw)).zip(db.iter_mut()).enumerate() {
            body(ch, dxc, dkc, dbc);
        }
    }
    (dx, dk, db)
}

// ---------------------------------------------------------------------------
// bilinear 2x upsampling, layout [C, H, W]
// ---------------------------------------------------------------------------

/// Per-axis interpolation taps for a 2x upscale with half-pixel centers.
fn bilinear2x_taps<T: Scalar>(n: usize) -> Vec<(usize, usize, T, T)> {
    let half = T::from_f64(0.5);
    (0..2 * n)
        .map(|o| {
            let src = (T::from_usize(o).unwrap() + half) * half - half;
            let floor = src.floor();
            let t = src - floor;
            let i0 = floor.to_f64().max(0.0) as usize;
            let i0 = i0.min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            // clamp below 0: weight collapses onto index 0
            if floor.to_f64() < 0.0 {
                (0, i1.min(n - 1), T::one(), T::zero())
            } else {
                (i0, i1, T::one() - t, t)
            }
        })
        .collect()
}

pub fn bilinear2x_fwd<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let ty = bilinear2x_taps::<T>(h);
    let tx = bilinear2x_taps::<T>(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * oh * ow];
    let body = |ch: usize, chunk: &mut [T]| {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, wy0, wy1) = ty[oy];
            for ox in 0..ow {
                let (x0, x1, wx0, wx1) = tx[ox];
                chunk[oy * ow + ox] = wy0 * (wx0 * xc[y0 * w + x0] + wx1 * xc[y0 * w + x1])
                    + wy1 * (wx0 * xc[y1 * w + x0] + wx1 * xc[y1 * w + x1]);
            }
        }
    };
    if c * oh * ow >= PAR_THRESHOLD {
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(ch, chunk)| body(ch, chunk));
    } else {
        for (ch, chunk) in out.chunks_mut(oh * ow).enumerate() {
            body(ch, chunk);
        }
    }
    out
}

pub fn bilinear2x_bwd<T: Scalar>(g: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let ty = bilinear2x_taps::<T>(h);
    let tx = bilinear2x_taps::<T>(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); c * h * w];
    let body = |ch: usize, chunk: &mut [T]| {
        let gc = &g[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, wy0, wy1) = ty[oy];
            for ox in 0..ow {
                let (x0, x1, wx0, wx1) = tx[ox];
                let gv = gc[oy * ow + ox];
                chunk[y0 * w + x0] += gv * wy0 * wx0;
                chunk[y0 * w + x1] += gv * wy0 * wx1;
                chunk[y1 * w + x0] += gv * wy1 * wx0;
                chunk[y1 * w + x1] += gv * wy1 * wx1;
            }
        }
    };
    if c * oh * ow >= PAR_THRESHOLD {
        dx.par_chunks_mut(h * w).enumerate().for_each(|(ch, chunk)| body(ch, chunk));
    } else {
        for (ch, chunk) in dx.chunks_mut(h * w).enumerate() {
            body(ch, chunk);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// padding / cropping, layout [C, H, W]
// ---------------------------------------------------------------------------

/// Reflected source index for coordinate `i` (may be negative or >= n).
/// Reflection excludes the border sample, matching the usual image convention.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    debug_assert!(n > 0);
    let period = (2 * n - 2).max(1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

pub struct PadSpec {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

pub fn pad_fwd<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, p: &PadSpec, reflect: bool) -> Vec<T> {
    let (oh, ow) = (h + p.top + p.bottom, w + p.left + p.right);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        let oc = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let sy = oy as isize - p.top as isize;
            for ox in 0..ow {
                let sx = ox as isize - p.left as isize;
                let inside = sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize;
                oc[oy * ow + ox] = if inside {
                    xc[sy as usize * w + sx as usize]
                } else if reflect {
                    xc[reflect_index(sy, h) * w + reflect_index(sx, w)]
                } else {
                    T::zero()
                };
            }
        }
    }
    out
}

pub fn pad_bwd<T: Scalar>(g: &[T], c: usize, h: usize, w: usize, p: &PadSpec, reflect: bool) -> Vec<T> {
    let (oh, ow) = (h + p.top + p.bottom, w + p.left + p.right);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let gc = &g[ch * oh * ow..(ch + 1) * oh * ow];
        let dc = &mut dx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let sy = oy as isize - p.top as isize;
            for ox in 0..ow {
                let sx = ox as isize - p.left as isize;
                let inside = sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize;
                if inside {
                    dc[sy as usize * w + sx as usize] += gc[oy * ow + ox];
                } else if reflect {
                    dc[reflect_index(sy, h) * w + reflect_index(sx, w)] += gc[oy * ow + ox];
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_basic() {
        // n = 4: ... 2 1 | 0 1 2 3 | 2 1 ...
        assert_eq!(reflect_index(-1, 4), 1);
        assert_eq!(reflect_index(-2, 4), 2);
        assert_eq!(reflect_index(0, 4), 0);
        assert_eq!(reflect_index(3, 4), 3);
        assert_eq!(reflect_index(4, 4), 2);
        assert_eq!(reflect_index(5, 4), 1);
        assert_eq!(reflect_index(0, 1), 0);
        assert_eq!(reflect_index(7, 1), 0);
    }

    #[test]
    fn bilinear2x_constant_preserved() {
        let x = vec![3.5f64; 4 * 4];
        let y = bilinear2x_fwd(&x, 1, 4, 4);
        assert_eq!(y.len(), 64);
        for v in y {
            assert!((v - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_out_dim_matches_formula() {
        assert_eq!(conv2d_out_dim(5, 1, 3, 1), 5);
        assert_eq!(conv2d_out_dim(5, 1, 3, 2), 3);
        assert_eq!(conv2d_out_dim(8, 0, 1, 1), 8);
    }
}
