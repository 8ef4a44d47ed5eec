//! Selective state-space recurrence (S6): per-token input-dependent
//! coefficients, a diagonal state transition, and a linear-time scan.
//!
//! The recurrence over tokens u[t] in R^Din with state size N:
//!
//!   delta[t] = softplus(W_dt u[t] + b_dt)            (> 0 per token/channel)
//!   B[t] = W_b u[t],  C[t] = W_c u[t]                (per-token, in R^N)
//!   Abar[t,d,j] = exp(delta[t,d] * A[d,j])           (zero-order hold)
//!   Bbar[t,d,j] = delta[t,d] * B[t,j]                (Euler)
//!   h[t,d,j] = Abar * h[t-1,d,j] + Bbar * u[t,d]     (h[-1] = 0)
//!   y[t,d] = sum_j C[t,j] h[t,d,j] + D[d] u[t,d]
//!
//! A is stored as -exp(a_log) so the transition stays strictly negative and
//! exp(delta * A) stays in (0, 1).

use crate::error::{Error, Result};
use crate::numerics::init::{self, Rng64};
use crate::numerics::tape::{CustomGrad, Tape, VarId};
use crate::numerics::tensor::{Scalar, Tensor};
use crate::numerics::{sigmoid, softplus, softplus_inv};
use rand::Rng;
use rayon::prelude::*;
use std::sync::Arc;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct S6Dims {
    pub din: usize,
    pub nstate: usize,
}

/// Learned parameters of one scan.
#[derive(Debug, Clone)]
pub struct S6Params<T: Scalar> {
    /// [Din, N]; the transition is A = -exp(a_log).
    pub a_log: Tensor<T>,
    /// [N, Din]
    pub w_b: Tensor<T>,
    /// [N, Din]
    pub w_c: Tensor<T>,
    /// [Din, Din]
    pub w_dt: Tensor<T>,
    /// [Din]
    pub b_dt: Tensor<T>,
    /// [Din] skip coefficient
    pub d_skip: Tensor<T>,
}

impl<T: Scalar> S6Params<T> {
    /// Timescale-spread initialization: A rows span 1..N, delta starts in
    /// roughly [1e-3, 1e-1], D starts at identity skip.
    pub fn init(dims: S6Dims, rng: &mut Rng64) -> Self {
        let S6Dims { din, nstate } = dims;
        let a_log = Tensor::from_fn(&[din, nstate], |i| {
            let j = i % nstate;
            T::from_f64(((j + 1) as f64).ln())
        });
        let w_b = init::kaiming_uniform(&[nstate, din], din, rng);
        let w_c = init::kaiming_uniform(&[nstate, din], din, rng);
        let w_dt = init::kaiming_uniform(&[din, din], din, rng);
        let b_dt = Tensor::from_fn(&[din], |_| {
            let dt = 10f64.powf(rng.random_range(-3.0..-1.0));
            softplus_inv(T::from_f64(dt))
        });
        let d_skip = Tensor::full(&[din], T::one());
        Self { a_log, w_b, w_c, w_dt, b_dt, d_skip }
    }

    pub fn dims(&self) -> S6Dims {
        let s = self.a_log.shape();
        S6Dims { din: s[0], nstate: s[1] }
    }

    /// Materialized transition matrix, strictly negative elementwise.
    pub fn a(&self) -> Tensor<T> {
        self.a_log.map(|v| -v.exp())
    }
}

/// Zero-order-hold discretization of one token's coefficients:
/// Abar = exp(delta (x) A) elementwise, Bbar = delta (x) B (outer product).
pub fn discretize<T: Scalar>(delta: &Tensor<T>, a: &Tensor<T>, b_t: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = a.shape();
    if s.len() != 2 {
        return Err(Error::invalid("discretize", format!("A must be [Din, N], got {s:?}")));
    }
    let (din, n) = (s[0], s[1]);
    if delta.shape() != [din] || b_t.shape() != [n] {
        return Err(Error::ShapeMismatch { context: "discretize", expected: vec![din, n], got: delta.shape().to_vec() });
    }
    if delta.data().iter().any(|&v| v <= T::zero()) {
        return Err(Error::invalid("discretize", "delta must be strictly positive"));
    }
    let abar = Tensor::from_fn(&[din, n], |i| (delta.data()[i / n] * a.data()[i]).exp());
    let bbar = Tensor::from_fn(&[din, n], |i| delta.data()[i / n] * b_t.data()[i % n]);
    Ok((abar, bbar))
}

// ---------------------------------------------------------------------------
// kernels
// ---------------------------------------------------------------------------

/// Per-token coefficient streams derived from the input.
struct Coeffs<T> {
    /// [L, Din], strictly positive
    delta: Vec<T>,
    /// [L, N]
    b: Vec<T>,
    /// [L, N]
    c: Vec<T>,
}

fn compute_coeffs<T: Scalar>(u: &[T], p: &S6Params<T>, l: usize, dims: S6Dims) -> Coeffs<T> {
    let S6Dims { din, nstate: n } = dims;
    let mut delta = vec![T::zero(); l * din];
    let mut b = vec![T::zero(); l * n];
    let mut c = vec![T::zero(); l * n];
    let w_dt = p.w_dt.data();
    let b_dt = p.b_dt.data();
    let w_b = p.w_b.data();
    let w_c = p.w_c.data();
    let body = |t: usize, dr: &mut [T], br: &mut [T], cr: &mut [T]| {
        let ut = &u[t * din..(t + 1) * din];
        for d in 0..din {
            let mut acc = b_dt[d];
            for i in 0..din {
                acc += w_dt[d * din + i] * ut[i];
            }
            dr[d] = softplus(acc);
        }
        for j in 0..n {
            let (mut accb, mut accc) = (T::zero(), T::zero());
            for i in 0..din {
                accb += w_b[j * din + i] * ut[i];
                accc += w_c[j * din + i] * ut[i];
            }
            br[j] = accb;
            cr[j] = accc;
        }
    };
    if l * din * n >= 1 << 14 {
        delta
            .par_chunks_mut(din)
            .zip(b.par_chunks_mut(n))
            .zip(c.par_chunks_mut(n))
            .enumerate()
            .for_each(|(t, ((dr, br), cr))| body(t, dr, br, cr));
    } else {
        for (t, ((dr, br), cr)) in delta.chunks_mut(din).zip(b.chunks_mut(n)).zip(c.chunks_mut(n)).enumerate() {
            body(t, dr, br, cr);
        }
    }
    Coeffs { delta, b, c }
}

/// The recurrence itself, on explicit coefficient streams. Fills `h` and
/// `abar` ([L, Din, N], token-major) and returns y [L, Din].
fn scan_recurrence<T: Scalar>(
    u: &[T],
    a: &[T],
    coeffs: &Coeffs<T>,
    d_skip: &[T],
    l: usize,
    dims: S6Dims,
    h: &mut [T],
    abar: &mut [T],
) -> Vec<T> {
    let S6Dims { din, nstate: n } = dims;
    // Channels evolve independently; each gets a sequential pass over t with
    // the running state kept in a local row. The network's big scans have
    // Din = 1, so there is nothing to gain from parallelizing over channels.
    let mut state = vec![T::zero(); n];
    for d in 0..din {
        state.iter_mut().for_each(|s| *s = T::zero());
        let ad = &a[d * n..(d + 1) * n];
        for t in 0..l {
            let dt = coeffs.delta[t * din + d];
            let ut = u[t * din + d];
            let bt = &coeffs.b[t * n..(t + 1) * n];
            let base = (t * din + d) * n;
            let hrow = &mut h[base..base + n];
            let arow = &mut abar[base..base + n];
            for j in 0..n {
                let ab = (dt * ad[j]).exp();
                state[j] = ab * state[j] + dt * bt[j] * ut;
                hrow[j] = state[j];
                arow[j] = ab;
            }
        }
    }

    let mut y = vec![T::zero(); l * din];
    let combine = |t: usize, yr: &mut [T]| {
        let ct = &coeffs.c[t * n..(t + 1) * n];
        for d in 0..din {
            let hrow = &h[(t * din + d) * n..(t * din + d + 1) * n];
            let mut acc = T::zero();
            for j in 0..n {
                acc += ct[j] * hrow[j];
            }
            yr[d] = acc + d_skip[d] * u[t * din + d];
        }
    };
    if l * din * n >= 1 << 14 {
        y.par_chunks_mut(din).enumerate().for_each(|(t, yr)| combine(t, yr));
    } else {
        for (t, yr) in y.chunks_mut(din).enumerate() {
            combine(t, yr);
        }
    }
    y
}

/// Forward scan on raw coefficient streams (no input-dependent projections).
/// This is the level at which the recurrence is linear in u.
pub fn scan_with_coeffs<T: Scalar>(
    u: &Tensor<T>,
    a: &Tensor<T>,
    delta: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
) -> Result<Tensor<T>> {
    let us = u.shape();
    if us.len() != 2 {
        return Err(Error::invalid("scan_with_coeffs", format!("u must be [L, Din], got {us:?}")));
    }
    let (l, din) = (us[0], us[1]);
    let n = a.shape()[1];
    if a.shape() != [din, n] || delta.shape() != [l, din] || b.shape() != [l, n] || c.shape() != [l, n] || d_skip.shape() != [din] {
        return Err(Error::ShapeMismatch { context: "scan_with_coeffs", expected: vec![l, din], got: delta.shape().to_vec() });
    }
    let dims = S6Dims { din, nstate: n };
    let coeffs = Coeffs { delta: delta.data().to_vec(), b: b.data().to_vec(), c: c.data().to_vec() };
    let mut h = vec![T::zero(); l * din * n];
    let mut abar = vec![T::zero(); l * din * n];
    let y = scan_recurrence(u.data(), a.data(), &coeffs, d_skip.data(), l, dims, &mut h, &mut abar);
    let out = Tensor::new(vec![l, din], y)?;
    out.check_finite("scan_with_coeffs")?;
    Ok(out)
}

/// Full selective scan: coefficients projected from the input, then the
/// recurrence. Pure function of (u, params).
pub fn selective_scan<T: Scalar>(u: &Tensor<T>, p: &S6Params<T>) -> Result<Tensor<T>> {
    let (y, _) = scan_forward(u, p)?;
    Ok(y)
}

/// Forward activations retained for the backward pass. The per-token B/C
/// projections are cheap to recompute from u, so they are not kept.
struct ScanSaved<T: Scalar> {
    u: Vec<T>,
    a: Vec<T>,
    delta: Vec<T>,
    h: Vec<T>,
    abar: Vec<T>,
    l: usize,
    dims: S6Dims,
}

fn scan_forward<T: Scalar>(u: &Tensor<T>, p: &S6Params<T>) -> Result<(Tensor<T>, ScanSaved<T>)> {
    let us = u.shape();
    if us.len() != 2 || us[0] == 0 {
        return Err(Error::invalid("selective_scan", format!("u must be [L >= 1, Din], got {us:?}")));
    }
    let (l, din) = (us[0], us[1]);
    let dims = p.dims();
    if din != dims.din {
        return Err(Error::ShapeMismatch { context: "selective_scan", expected: vec![dims.din], got: vec![din] });
    }
    let n = dims.nstate;
    let a = p.a();
    let coeffs = compute_coeffs(u.data(), p, l, dims);
    let mut h = vec![T::zero(); l * din * n];
    let mut abar = vec![T::zero(); l * din * n];
    let y = scan_recurrence(u.data(), a.data(), &coeffs, p.d_skip.data(), l, dims, &mut h, &mut abar);
    let out = Tensor::new(vec![l, din], y)?;
    out.check_finite("selective_scan")?;
    let saved = ScanSaved { u: u.data().to_vec(), a: a.into_data(), delta: coeffs.delta, h, abar, l, dims };
    Ok((out, saved))
}

/// Gradients of the scan w.r.t. u and every parameter tensor.
pub struct ScanGrads<T: Scalar> {
    pub du: Tensor<T>,
    pub da_log: Tensor<T>,
    pub dw_b: Tensor<T>,
    pub dw_c: Tensor<T>,
    pub dw_dt: Tensor<T>,
    pub db_dt: Tensor<T>,
    pub dd_skip: Tensor<T>,
}

/// Reverse pass over retained activations (the forward must have been run by
/// [`selective_scan_backward`] / the tape op, which keep them).
fn scan_backward<T: Scalar>(saved: &ScanSaved<T>, p: &S6Params<T>, dy: &[T]) -> ScanGrads<T> {
    let S6Dims { din, nstate: n } = saved.dims;
    let l = saved.l;
    let (u, a, delta, h, abar) = (&saved.u, &saved.a, &saved.delta, &saved.h, &saved.abar);

    let mut du = vec![T::zero(); l * din];
    let mut da = vec![T::zero(); din * n];
    let mut db = vec![T::zero(); l * n];
    let mut dc = vec![T::zero(); l * n];
    let mut ddelta = vec![T::zero(); l * din];
    let mut dd_skip = vec![T::zero(); din];

    // Reverse sweep, carrying dL/dh[t] per (d, j). B[t]/C[t] are recomputed
    // from u on the fly rather than retained.
    let mut dh = vec![T::zero(); din * n];
    let mut bt = vec![T::zero(); n];
    let mut ct = vec![T::zero(); n];
    for t in (0..l).rev() {
        let ut_row = &u[t * din..(t + 1) * din];
        for j in 0..n {
            let (mut accb, mut accc) = (T::zero(), T::zero());
            for i in 0..din {
                accb += p.w_b.data()[j * din + i] * ut_row[i];
                accc += p.w_c.data()[j * din + i] * ut_row[i];
            }
            bt[j] = accb;
            ct[j] = accc;
        }
        for d in 0..din {
            let gy = dy[t * din + d];
            let ut = u[t * din + d];
            let dt = delta[t * din + d];
            let base = (t * din + d) * n;
            let mut ddelta_acc = T::zero();
            for j in 0..n {
                // total dL/dh[t,d,j]: direct output use + carry-in from t+1
                let dhj = dh[d * n + j] + ct[j] * gy;
                // dc via y
                dc[t * n + j] += gy * h[base + j];
                // recurrence pieces
                let hprev = if t > 0 { h[base + j - din * n] } else { T::zero() };
                let dabar = dhj * hprev;
                da[d * n + j] += dabar * abar[base + j] * dt;
                ddelta_acc += dabar * abar[base + j] * a[d * n + j] + dhj * bt[j] * ut;
                db[t * n + j] += dhj * dt * ut;
                du[t * din + d] += dhj * dt * bt[j];
                // carry to t-1
                dh[d * n + j] = dhj * abar[base + j];
            }
            ddelta[t * din + d] = ddelta_acc;
            du[t * din + d] += gy * p.d_skip.data()[d];
            dd_skip[d] += gy * ut;
        }
    }

    // Chain through the projections.
    let w_b = p.w_b.data();
    let w_c = p.w_c.data();
    let w_dt = p.w_dt.data();
    let mut dw_b = vec![T::zero(); n * din];
    let mut dw_c = vec![T::zero(); n * din];
    let mut dw_dt = vec![T::zero(); din * din];
    let mut db_dt = vec![T::zero(); din];
    for t in 0..l {
        let ut = &u[t * din..(t + 1) * din];
        for j in 0..n {
            let (gb, gc) = (db[t * n + j], dc[t * n + j]);
            for i in 0..din {
                dw_b[j * din + i] += gb * ut[i];
                dw_c[j * din + i] += gc * ut[i];
                du[t * din + i] += gb * w_b[j * din + i] + gc * w_c[j * din + i];
            }
        }
        for d in 0..din {
            // delta = softplus(pre); sigmoid(pre) = 1 - exp(-delta)
            let gpre = ddelta[t * din + d] * (T::one() - (-delta[t * din + d]).exp());
            db_dt[d] += gpre;
            for i in 0..din {
                dw_dt[d * din + i] += gpre * ut[i];
                du[t * din + i] += gpre * w_dt[d * din + i];
            }
        }
    }

    // A = -exp(a_log): dL/da_log = dL/dA * A
    let da_log: Vec<T> = da.iter().zip(a.iter()).map(|(&g, &av)| g * av).collect();

    ScanGrads {
        du: Tensor::new(vec![l, din], du).unwrap(),
        da_log: Tensor::new(vec![din, n], da_log).unwrap(),
        dw_b: Tensor::new(vec![n, din], dw_b).unwrap(),
        dw_c: Tensor::new(vec![n, din], dw_c).unwrap(),
        dw_dt: Tensor::new(vec![din, din], dw_dt).unwrap(),
        db_dt: Tensor::new(vec![din], db_dt).unwrap(),
        dd_skip: Tensor::new(vec![din], dd_skip).unwrap(),
    }
}

/// Standalone forward + backward: returns y and the gradients of
/// `sum(dy * y)` w.r.t. u and the parameters.
pub fn selective_scan_backward<T: Scalar>(u: &Tensor<T>, p: &S6Params<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, ScanGrads<T>)> {
    let (y, saved) = scan_forward(u, p)?;
    if dy.shape() != y.shape() {
        return Err(Error::ShapeMismatch { context: "selective_scan_backward", expected: y.shape().to_vec(), got: dy.shape().to_vec() });
    }
    let grads = scan_backward(&saved, p, dy.data());
    Ok((y, grads))
}

// ---------------------------------------------------------------------------
// tape integration
// ---------------------------------------------------------------------------

/// Tape-resident scan parameters.
#[derive(Debug, Clone, Copy)]
pub struct S6ParamIds {
    pub a_log: VarId,
    pub w_b: VarId,
    pub w_c: VarId,
    pub w_dt: VarId,
    pub b_dt: VarId,
    pub d_skip: VarId,
}

impl S6ParamIds {
    pub fn all(&self) -> [VarId; 6] {
        [self.a_log, self.w_b, self.w_c, self.w_dt, self.b_dt, self.d_skip]
    }
}

struct ScanRule<T: Scalar> {
    saved: Arc<ScanSaved<T>>,
    params: S6Params<T>,
}

impl<T: Scalar> CustomGrad<T> for ScanRule<T> {
    fn name(&self) -> &'static str {
        "s6_scan"
    }

    fn input_grads(&self, grad_out: &[T]) -> Vec<Option<Vec<T>>> {
        let g = scan_backward(&self.saved, &self.params, grad_out);
        vec![
            Some(g.du.into_data()),
            Some(g.da_log.into_data()),
            Some(g.dw_b.into_data()),
            Some(g.dw_c.into_data()),
            Some(g.dw_dt.into_data()),
            Some(g.db_dt.into_data()),
            Some(g.dd_skip.into_data()),
        ]
    }
}

impl<T: Scalar> Tape<T> {
    /// Record a selective scan of u: [L, Din] with tape-resident parameters.
    pub fn s6_scan(&mut self, u: VarId, ids: &S6ParamIds) -> Result<VarId> {
        let params = S6Params {
            a_log: self.value(ids.a_log).clone(),
            w_b: self.value(ids.w_b).clone(),
            w_c: self.value(ids.w_c).clone(),
            w_dt: self.value(ids.w_dt).clone(),
            b_dt: self.value(ids.b_dt).clone(),
            d_skip: self.value(ids.d_skip).clone(),
        };
        let (y, saved) = scan_forward(self.value(u), &params)?;
        let rule = ScanRule { saved: Arc::new(saved), params };
        let inputs = vec![u, ids.a_log, ids.w_b, ids.w_c, ids.w_dt, ids.b_dt, ids.d_skip];
        self.custom(inputs, y, Box::new(rule))
    }
}

// ---------------------------------------------------------------------------
// linear-complexity benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub len: usize,
    pub scan_ms: f64,
    pub attention_ms: f64,
}

/// Row-streaming single-head attention: O(L^2 d) time, O(L) extra memory.
/// The quadratic contrast case for the benchmark.
pub fn attention_reference(q: &[f32], k: &[f32], v: &[f32], l: usize, d: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; l * d];
    let mut scores = vec![0.0f32; l];
    let scale = 1.0 / (d as f32).sqrt();
    for i in 0..l {
        let qi = &q[i * d..(i + 1) * d];
        let mut max = f32::NEG_INFINITY;
        for j in 0..l {
            let kj = &k[j * d..(j + 1) * d];
            let mut s = 0.0;
            for p in 0..d {
                s += qi[p] * kj[p];
            }
            let s = s * scale;
            scores[j] = s;
            if s > max {
                max = s;
            }
        }
        let mut denom = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            denom += *s;
        }
        let inv = 1.0 / denom;
        let oi = &mut out[i * d..(i + 1) * d];
        for j in 0..l {
            let w = scores[j] * inv;
            let vj = &v[j * d..(j + 1) * d];
            for p in 0..d {
                oi[p] += w * vj[p];
            }
        }
    }
    out
}

/// Times the selective scan against the quadratic attention reference over a
/// list of sequence lengths. Each measurement is the median of `reps` runs;
/// the scan repeats `scan_iters` times per run so short lengths stay above
/// timer resolution. Single-threaded by construction so the scaling ratios
/// are not distorted by pool scheduling.
pub fn scan_complexity_bench(lengths: &[usize], reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    use rand::SeedableRng;
    if lengths.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("scan_complexity_bench", "lengths must be sorted ascending"));
    }
    let dims = S6Dims { din: 4, nstate: 16 };
    let att_d = 8;
    let scan_iters = 16;
    let mut rng = Rng64::seed_from_u64(seed);
    let p: S6Params<f32> = S6Params::init(dims, &mut rng);
    let mut rows = Vec::new();
    for &l in lengths {
        let u: Tensor<f32> = init::uniform(&[l, dims.din], -1.0, 1.0, &mut rng);
        let q: Vec<f32> = (0..l * att_d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f32> = (0..l * att_d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f32> = (0..l * att_d).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut scan_times = Vec::with_capacity(reps);
        let mut att_times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            for _ in 0..scan_iters {
                let y = selective_scan(&u, &p)?;
                std::hint::black_box(y);
            }
            scan_times.push(t0.elapsed().as_secs_f64() * 1e3 / scan_iters as f64);

            let t1 = Instant::now();
            let o = attention_reference(&q, &k, &v, l, att_d);
            std::hint::black_box(o);
            att_times.push(t1.elapsed().as_secs_f64() * 1e3);
        }
        rows.push(BenchRow { len: l, scan_ms: median(&mut scan_times), attention_ms: median(&mut att_times) });
    }
    Ok(rows)
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Independent step-by-step oracle: recomputes every coefficient per
    /// token and rolls the state with no layout tricks.
    pub(crate) fn naive_scan(u: &Tensor<f64>, p: &S6Params<f64>) -> Tensor<f64> {
        let (l, din) = (u.shape()[0], u.shape()[1]);
        let n = p.dims().nstate;
        let a = p.a();
        let mut h = vec![0.0; din * n];
        let mut y = vec![0.0; l * din];
        for t in 0..l {
            let ut = &u.data()[t * din..(t + 1) * din];
            // projections
            let mut delta = vec![0.0; din];
            for d in 0..din {
                let mut acc = p.b_dt.data()[d];
                for i in 0..din {
                    acc += p.w_dt.data()[d * din + i] * ut[i];
                }
                delta[d] = (1.0 + acc.exp()).ln();
            }
            let mut bt = vec![0.0; n];
            let mut ct = vec![0.0; n];
            for j in 0..n {
                for i in 0..din {
                    bt[j] += p.w_b.data()[j * din + i] * ut[i];
                    ct[j] += p.w_c.data()[j * din + i] * ut[i];
                }
            }
            for d in 0..din {
                let mut acc = 0.0;
                for j in 0..n {
                    let abar = (delta[d] * a.data()[d * n + j]).exp();
                    let bbar = delta[d] * bt[j];
                    h[d * n + j] = abar * h[d * n + j] + bbar * ut[d];
                    acc += ct[j] * h[d * n + j];
                }
                y[t * din + d] = acc + p.d_skip.data()[d] * ut[d];
            }
        }
        Tensor::new(vec![l, din], y).unwrap()
    }

    fn rand_tensor(shape: &[usize], rng: &mut Rng64) -> Tensor<f64> {
        init::uniform(shape, -1.0, 1.0, rng)
    }

    #[test]
    fn discretize_identity_and_limit_cases() {
        // A = 0, delta = 1 -> Abar = 1
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let delta = Tensor::full(&[2], 1.0);
        let b = Tensor::full(&[3], 2.0);
        let (abar, bbar) = discretize(&delta, &a, &b).unwrap();
        assert!(abar.data().iter().all(|&v| v == 1.0));
        assert!(bbar.data().iter().all(|&v| (v - 2.0).abs() < 1e-12));

        // delta -> 0: Abar -> 1, Bbar -> 0
        let a = Tensor::full(&[1, 2], -3.0);
        let delta = Tensor::full(&[1], 1e-8);
        let b = Tensor::full(&[2], 5.0);
        let (abar, bbar) = discretize(&delta, &a, &b).unwrap();
        assert!(abar.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        assert!(bbar.data().iter().all(|&v| v.abs() < 1e-6));

        // non-positive delta rejected
        let delta = Tensor::full(&[1], 0.0);
        assert!(discretize(&delta, &a, &b).is_err());
    }

    #[test]
    fn discretize_keeps_abar_in_unit_interval() {
        let mut rng = Rng64::seed_from_u64(5);
        for _ in 0..1000 {
            let a = Tensor::<f64>::from_fn(&[3, 4], |_| -rng.random_range(1e-3..4.0f64));
            let delta = Tensor::from_fn(&[3], |_| rng.random_range(1e-4..2.0f64));
            let b = rand_tensor(&[4], &mut rng);
            let (abar, _) = discretize(&delta, &a, &b).unwrap();
            assert!(abar.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn degenerate_parameters_give_running_sum() {
        // Abar = 1 (A ~ 0 via a_log -> -inf is unreachable; use raw coeff API),
        // B = C = 1, delta = 1, D = 0, N = 1: y_t = sum_{s<=t} u_s
        let l = 6;
        let u = Tensor::<f64>::from_fn(&[l, 1], |i| (i + 1) as f64);
        let a = Tensor::zeros(&[1, 1]);
        let delta = Tensor::full(&[l, 1], 1.0);
        let b = Tensor::full(&[l, 1], 1.0);
        let c = Tensor::full(&[l, 1], 1.0);
        let d = Tensor::zeros(&[1]);
        let y = scan_with_coeffs(&u, &a, &delta, &b, &c, &d).unwrap();
        let mut run = 0.0;
        for t in 0..l {
            run += (t + 1) as f64;
            assert!((y.data()[t] - run).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn single_step_has_no_recurrence() {
        let mut rng = Rng64::seed_from_u64(9);
        let p: S6Params<f64> = S6Params::init(S6Dims { din: 3, nstate: 4 }, &mut rng);
        let u = rand_tensor(&[1, 3], &mut rng);
        let y = selective_scan(&u, &p).unwrap();
        // y_1 = C_1 . (Bbar_1 u_1) + D u_1, computed by hand here
        let ut = u.data();
        let n = 4;
        for d in 0..3 {
            let mut delta = p.b_dt.data()[d];
            for i in 0..3 {
                delta += p.w_dt.data()[d * 3 + i] * ut[i];
            }
            let delta = (1.0 + delta.exp()).ln();
            let mut acc = 0.0;
            for j in 0..n {
                let mut bt = 0.0;
                let mut ct = 0.0;
                for i in 0..3 {
                    bt += p.w_b.data()[j * 3 + i] * ut[i];
                    ct += p.w_c.data()[j * 3 + i] * ut[i];
                }
                acc += ct * delta * bt * ut[d];
            }
            acc += p.d_skip.data()[d] * ut[d];
            assert!((y.data()[d] - acc).abs() < 1e-10, "d={d}: {} vs {acc}", y.data()[d]);
        }
    }

    #[test]
    fn matches_naive_oracle_on_random_instances() {
        let mut rng = Rng64::seed_from_u64(2024);
        for trial in 0..200 {
            let l = rng.random_range(1..=64);
            let din = rng.random_range(1..=8);
            let n = rng.random_range(1..=16);
            let p: S6Params<f64> = S6Params::init(S6Dims { din, nstate: n }, &mut rng);
            let u = rand_tensor(&[l, din], &mut rng);
            let fast = selective_scan(&u, &p).unwrap();
            let slow = naive_scan(&u, &p);
            let max = fast
                .data()
                .iter()
                .zip(slow.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max < 1e-5, "trial {trial}: max abs diff {max}");
        }
    }

    #[test]
    fn causality_future_tokens_do_not_affect_past_outputs() {
        let mut rng = Rng64::seed_from_u64(77);
        let p: S6Params<f64> = S6Params::init(S6Dims { din: 2, nstate: 8 }, &mut rng);
        let u = rand_tensor(&[32, 2], &mut rng);
        let y = selective_scan(&u, &p).unwrap();
        let cut = 20;
        let mut u2 = u.clone();
        for i in cut * 2..u2.numel() {
            u2.data_mut()[i] += 3.0;
        }
        let y2 = selective_scan(&u2, &p).unwrap();
        for i in 0..cut * 2 {
            assert_eq!(y.data()[i], y2.data()[i], "prefix diverged at {i}");
        }
        assert!(y.data()[cut * 2..] != y2.data()[cut * 2..]);
    }

    #[test]
    fn linear_in_u_at_fixed_coefficients() {
        let mut rng = Rng64::seed_from_u64(31);
        let (l, din, n) = (24, 3, 5);
        let a = Tensor::<f64>::from_fn(&[din, n], |_| -rng.random_range(0.1..2.0f64));
        let delta = Tensor::from_fn(&[l, din], |_| rng.random_range(0.01..1.0f64));
        let b = rand_tensor(&[l, n], &mut rng);
        let c = rand_tensor(&[l, n], &mut rng);
        let d = rand_tensor(&[din], &mut rng);
        let u1 = rand_tensor(&[l, din], &mut rng);
        let u2 = rand_tensor(&[l, din], &mut rng);
        let sum = Tensor::new(
            vec![l, din],
            u1.data().iter().zip(u2.data()).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        let y1 = scan_with_coeffs(&u1, &a, &delta, &b, &c, &d).unwrap();
        let y2 = scan_with_coeffs(&u2, &a, &delta, &b, &c, &d).unwrap();
        let ys = scan_with_coeffs(&sum, &a, &delta, &b, &c, &d).unwrap();
        for i in 0..l * din {
            assert!((ys.data()[i] - y1.data()[i] - y2.data()[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn bounded_input_long_scan_stays_finite() {
        let mut rng = Rng64::seed_from_u64(4);
        let p: S6Params<f32> = S6Params::init(S6Dims { din: 2, nstate: 8 }, &mut rng);
        let u: Tensor<f32> = init::uniform(&[65536, 2], -1.0, 1.0, &mut rng);
        let y = selective_scan(&u, &p).unwrap();
        assert!(y.is_finite());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradients() {
        let mut rng = Rng64::seed_from_u64(12);
        let p: S6Params<f64> = S6Params::init(S6Dims { din: 2, nstate: 4 }, &mut rng);
        let u = rand_tensor(&[10, 2], &mut rng);
        let dy = Tensor::zeros(&[10, 2]);
        let (_, g) = selective_scan_backward(&u, &p, &dy).unwrap();
        assert!(g.da_log.data().iter().all(|&v| v == 0.0));
        assert!(g.dw_b.data().iter().all(|&v| v == 0.0));
        assert!(g.du.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn d_skip_gradient_matches_closed_form() {
        // dL/dD[d] = sum_t dy[t,d] * u[t,d]
        let mut rng = Rng64::seed_from_u64(13);
        let p: S6Params<f64> = S6Params::init(S6Dims { din: 3, nstate: 4 }, &mut rng);
        let u = rand_tensor(&[16, 3], &mut rng);
        let dy = rand_tensor(&[16, 3], &mut rng);
        let (_, g) = selective_scan_backward(&u, &p, &dy).unwrap();
        for d in 0..3 {
            let expect: f64 = (0..16).map(|t| dy.data()[t * 3 + d] * u.data()[t * 3 + d]).sum();
            assert!((g.dd_skip.data()[d] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn full_gradient_check_against_finite_differences() {
        use crate::numerics::gradcheck::{check_against_fd, FD_STEP};
        let _ = FD_STEP;
        let mut rng = Rng64::seed_from_u64(21);
        let dims = S6Dims { din: 3, nstate: 4 };
        let p: S6Params<f64> = S6Params::init(dims, &mut rng);
        let u = rand_tensor(&[16, 3], &mut rng);

        let mut tape = Tape::<f64>::new();
        let ids = S6ParamIds {
            a_log: tape.param(p.a_log.clone()),
            w_b: tape.param(p.w_b.clone()),
            w_c: tape.param(p.w_c.clone()),
            w_dt: tape.param(p.w_dt.clone()),
            b_dt: tape.param(p.b_dt.clone()),
            d_skip: tape.param(p.d_skip.clone()),
        };
        let uid = tape.param(u);
        tape.seal_params();
        let mut leaves = vec![uid];
        leaves.extend(ids.all());
        let report = check_against_fd(
            "s6_scan",
            &mut tape,
            &leaves,
            |t| {
                let y = t.s6_scan(uid, &ids)?;
                t.mean_all(y)
            },
            1e-3,
            12,
            &mut rng,
        )
        .unwrap();
        assert!(report.passed(), "s6 gradient check failed: {}", report.max_rel_err);
    }

    #[test]
    fn bench_runs_and_reports_positive_times() {
        let rows = scan_complexity_bench(&[1, 64], 2, 7).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.scan_ms > 0.0 && r.attention_ms > 0.0));
    }
}
