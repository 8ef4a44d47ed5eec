//! Reverse-mode differentiation tape.
//!
//! Every primitive records one node: the produced value, the ids of its
//! inputs, and enough context to run its backward rule. Nodes only refer to
//! earlier nodes, so replaying the tape in reverse order visits each use
//! exactly once and accumulates gradient sums naturally.
//!
//! Parameters are allocated first and survive [`Tape::reset`]; everything a
//! forward pass creates after [`Tape::seal_params`] is truncated by the next
//! reset. One training step owns one tape.

use super::ops;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use std::sync::Arc;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

/// Backward rule for a fused op implemented outside this module (the
/// selective scan). Captures its own saved activations at record time.
pub trait CustomGrad<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;
    /// Gradients aligned with the recorded input list; `None` skips an input.
    fn input_grads(&self, grad_out: &[T]) -> Vec<Option<Vec<T>>>;
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, T),
    Silu(VarId),
    Sigmoid(VarId),
    Gelu(VarId),
    Abs(VarId),
    MeanAll(VarId),
    Reshape(VarId),
    Transpose2(VarId, usize, usize),
    Linear { x: VarId, w: VarId, b: VarId },
    LayerNorm { x: VarId, gamma: VarId, beta: VarId, mean: Vec<T>, rstd: Vec<T> },
    Conv2d { x: VarId, k: VarId, b: Option<VarId>, stride: usize, pad: usize },
    DwConv2d { x: VarId, k: VarId, b: Option<VarId>, pad: usize },
    Bilinear2x(VarId),
    Pad { x: VarId, spec: ops::PadSpec, reflect: bool },
    Crop { x: VarId, top: usize, left: usize },
    ConcatCh(VarId, VarId),
    SliceCh { x: VarId, start: usize },
    GatherFlat { x: VarId, map: Arc<Vec<usize>> },
    GatherCh { x: VarId, idx: Arc<Vec<usize>> },
    Fft2(VarId),
    Custom { inputs: Vec<VarId>, rule: Box<dyn CustomGrad<T>> },
}

pub(crate) struct Node<T: Scalar> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`VarId`].
pub struct Gradients<T: Scalar> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: VarId) -> Option<&[T]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    watermark: usize,
    sealed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), watermark: 0, sealed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf. Must be allocated before `seal_params`.
    pub fn param(&mut self, value: Tensor<T>) -> VarId {
        assert!(!self.sealed, "parameters must be allocated before seal_params()");
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Marks the end of parameter allocation; later nodes are transient.
    pub fn seal_params(&mut self) {
        self.sealed = true;
        self.watermark = self.nodes.len();
    }

    /// Non-trainable leaf (network inputs, targets).
    pub fn input(&mut self, value: Tensor<T>) -> VarId {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Leaf that participates in gradient checks.
    pub fn input_grad(&mut self, value: Tensor<T>) -> VarId {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Drops every node recorded after `seal_params`. Parameter values and
    /// ids survive; no parameter value is altered.
    pub fn reset(&mut self) {
        if self.sealed {
            self.nodes.truncate(self.watermark);
        } else {
            self.nodes.clear();
        }
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Mutable access to a leaf's buffer (optimizer updates, checkpoint load).
    pub fn leaf_data_mut(&mut self, id: VarId) -> &mut [T] {
        let node = &mut self.nodes[id.0];
        debug_assert!(matches!(node.op, Op::Leaf), "only leaves may be mutated");
        node.value.data_mut()
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(Node { value, op, requires_grad });
        id
    }

    fn push(&mut self, context: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<VarId> {
        value.check_finite(context)?;
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn rg(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn same_shape(&self, context: &'static str, a: VarId, b: VarId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                context,
                expected: self.shape(a).to_vec(),
                got: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("add", value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape("sub", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: VarId, c: T) -> Result<VarId> {
        let value = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push("scale", value, Op::Scale(a, c), rg)
    }

    pub fn silu(&mut self, a: VarId) -> Result<VarId> {
        let value = self.value(a).map(silu);
        let rg = self.rg(a);
        self.push("silu", value, Op::Silu(a), rg)
    }

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId> {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push("sigmoid", value, Op::Sigmoid(a), rg)
    }

    pub fn gelu(&mut self, a: VarId) -> Result<VarId> {
        let value = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push("gelu", value, Op::Gelu(a), rg)
    }

    pub fn abs(&mut self, a: VarId) -> Result<VarId> {
        let value = self.value(a).map(|v| v.abs());
        let rg = self.rg(a);
        self.push("abs", value, Op::Abs(a), rg)
    }

    pub fn mean_all(&mut self, a: VarId) -> Result<VarId> {
        let n = T::from_usize(self.value(a).numel()).unwrap();
        let sum: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push("mean_all", Tensor::scalar(sum / n), Op::MeanAll(a), rg)
    }

    // -- structure -----------------------------------------------------------

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> Result<VarId> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        self.push("reshape", value, Op::Reshape(a), rg)
    }

    /// [M, N] -> [N, M]
    pub fn transpose2(&mut self, a: VarId) -> Result<VarId> {
        let shape = self.shape(a);
        if shape.len() != 2 {
            return Err(Error::invalid("transpose2", format!("expected rank 2, got {shape:?}")));
        }
        let (m, n) = (shape[0], shape[1]);
        let x = self.value(a).data();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = x[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        let rg = self.rg(a);
        self.push("transpose2", value, Op::Transpose2(a, m, n), rg)
    }

    pub fn concat_ch(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(Error::ShapeMismatch { context: "concat_ch", expected: sa, got: sb });
        }
        let mut data = Vec::with_capacity(self.value(a).numel() + self.value(b).numel());
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(vec![sa[0] + sb[0], sa[1], sa[2]], data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("concat_ch", value, Op::ConcatCh(a, b), rg)
    }

    pub fn slice_ch(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || start + len > s[0] {
            return Err(Error::invalid("slice_ch", format!("slice {start}..{} of shape {s:?}", start + len)));
        }
        let hw = s[1] * s[2];
        let data = self.value(a).data()[start * hw..(start + len) * hw].to_vec();
        let value = Tensor::new(vec![len, s[1], s[2]], data)?;
        let rg = self.rg(a);
        self.push("slice_ch", value, Op::SliceCh { x: a, start }, rg)
    }

    /// out[i] = x[map[i]] over flattened buffers. `map` must be a permutation
    /// of 0..numel (each source element used exactly once).
    pub fn gather_flat(&mut self, a: VarId, map: Arc<Vec<usize>>, out_shape: &[usize]) -> Result<VarId> {
        let n = self.value(a).numel();
        if map.len() != n || out_shape.iter().product::<usize>() != n {
            return Err(Error::invalid("gather_flat", format!("map length {} vs numel {n}", map.len())));
        }
        let x = self.value(a).data();
        let data = map.iter().map(|&i| x[i]).collect();
        let value = Tensor::new(out_shape.to_vec(), data)?;
        let rg = self.rg(a);
        self.push("gather_flat", value, Op::GatherFlat { x: a, map }, rg)
    }

    /// Channel gather with duplicates allowed: out[k] = x[idx[k], :, :].
    pub fn gather_ch(&mut self, a: VarId, idx: Arc<Vec<usize>>) -> Result<VarId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::invalid("gather_ch", format!("expected [C,H,W], got {s:?}")));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(Error::invalid("gather_ch", format!("channel index {bad} out of range {}", s[0])));
        }
        let hw = s[1] * s[2];
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * hw);
        for &i in idx.iter() {
            data.extend_from_slice(&x[i * hw..(i + 1) * hw]);
        }
        let value = Tensor::new(vec![idx.len(), s[1], s[2]], data)?;
        let rg = self.rg(a);
        self.push("gather_ch", value, Op::GatherCh { x: a, idx }, rg)
    }

    // -- structured primitives -------------------------------------------------

    /// Affine map over the last axis: x[..., Cin] -> [..., Cout].
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        let cin = *xs.last().ok_or_else(|| Error::invalid("linear", "scalar input"))?;
        if ws.len() != 2 || ws[1] != cin || bs != vec![ws[0]] {
            return Err(Error::ShapeMismatch { context: "linear", expected: vec![bs[0], cin], got: ws });
        }
        let (cout, rows) = (ws[0], self.value(x).numel() / cin);
        let data = ops::linear_fwd(self.value(x).data(), self.value(w).data(), self.value(b).data(), rows, cin, cout);
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = cout;
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push("linear", value, Op::Linear { x, w, b }, rg)
    }

    /// Layer normalization over the last axis, then affine gamma/beta.
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: T) -> Result<VarId> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch { context: "layer_norm", expected: vec![c], got: self.shape(gamma).to_vec() });
        }
        if eps <= T::zero() {
            return Err(Error::invalid("layer_norm", "eps must be positive"));
        }
        let rows = self.value(x).numel() / c;
        let (data, mean, rstd) =
            ops::layer_norm_fwd(self.value(x).data(), self.value(gamma).data(), self.value(beta).data(), rows, c, eps);
        let value = Tensor::new(xs, data)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push("layer_norm", value, Op::LayerNorm { x, gamma, beta, mean, rstd }, rg)
    }

    /// Cross-correlation of x: [Cin, H, W] with k: [Cout, Cin, kh, kw].
    pub fn conv2d(&mut self, x: VarId, k: VarId, b: Option<VarId>, stride: usize, pad: usize) -> Result<VarId> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] {
            return Err(Error::ShapeMismatch { context: "conv2d", expected: xs, got: ks });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::invalid("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::ShapeMismatch { context: "conv2d", expected: vec![cout], got: self.shape(b).to_vec() });
            }
        }
        let data = ops::conv2d_fwd(
            self.value(x).data(),
            self.value(k).data(),
            b.map(|b| self.value(b).data()),
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
        );
        let (oh, ow) = (ops::conv2d_out_dim(h, pad, kh, stride), ops::conv2d_out_dim(w, pad, kw, stride));
        let value = Tensor::new(vec![cout, oh, ow], data)?;
        let rg = self.rg(x) || self.rg(k) || b.is_some_and(|b| self.rg(b));
        self.push("conv2d", value, Op::Conv2d { x, k, b, stride, pad }, rg)
    }

    /// Channel-independent convolution of x: [C, H, W] with k: [C, 1, kh, kw], stride 1.
    pub fn dwconv2d(&mut self, x: VarId, k: VarId, b: Option<VarId>, pad: usize) -> Result<VarId> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 3 || ks.len() != 4 || ks[0] != xs[0] || ks[1] != 1 {
            return Err(Error::ShapeMismatch { context: "dwconv2d", expected: xs, got: ks });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (kh, kw) = (ks[2], ks[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::invalid("dwconv2d", format!("kernel {kh}x{kw} larger than padded input")));
        }
        let data = ops::dwconv2d_fwd(
            self.value(x).data(),
            self.value(k).data(),
            b.map(|b| self.value(b).data()),
            c,
            h,
            w,
            kh,
            kw,
            pad,
        );
        let (oh, ow) = (ops::conv2d_out_dim(h, pad, kh, 1), ops::conv2d_out_dim(w, pad, kw, 1));
        let value = Tensor::new(vec![c, oh, ow], data)?;
        let rg = self.rg(x) || self.rg(k) || b.is_some_and(|b| self.rg(b));
        self.push("dwconv2d", value, Op::DwConv2d { x, k, b, pad }, rg)
    }

    pub fn bilinear2x(&mut self, x: VarId) -> Result<VarId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::invalid("bilinear2x", format!("expected [C,H,W], got {xs:?}")));
        }
        let data = ops::bilinear2x_fwd(self.value(x).data(), xs[0], xs[1], xs[2]);
        let value = Tensor::new(vec![xs[0], 2 * xs[1], 2 * xs[2]], data)?;
        let rg = self.rg(x);
        self.push("bilinear2x", value, Op::Bilinear2x(x), rg)
    }

    pub fn pad(&mut self, x: VarId, top: usize, bottom: usize, left: usize, right: usize, reflect: bool) -> Result<VarId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::invalid("pad", format!("expected [C,H,W], got {xs:?}")));
        }
        if reflect && (top >= xs[1] || bottom >= xs[1] || left >= xs[2] || right >= xs[2]) {
            return Err(Error::invalid("pad", "reflect padding must be smaller than the map"));
        }
        let spec = ops::PadSpec { top, bottom, left, right };
        let data = ops::pad_fwd(self.value(x).data(), xs[0], xs[1], xs[2], &spec, reflect);
        let value = Tensor::new(vec![xs[0], xs[1] + top + bottom, xs[2] + left + right], data)?;
        let rg = self.rg(x);
        self.push("pad", value, Op::Pad { x, spec, reflect }, rg)
    }

    pub fn crop(&mut self, x: VarId, top: usize, left: usize, out_h: usize, out_w: usize) -> Result<VarId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || top + out_h > xs[1] || left + out_w > xs[2] {
            return Err(Error::invalid("crop", format!("crop {out_h}x{out_w}+{top}+{left} of {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            for y in 0..out_h {
                let base = (ch * h + top + y) * w + left;
                data.extend_from_slice(&src[base..base + out_w]);
            }
        }
        let value = Tensor::new(vec![c, out_h, out_w], data)?;
        let rg = self.rg(x);
        self.push("crop", value, Op::Crop { x, top, left }, rg)
    }

    /// Unnormalized forward 2-D DFT of a real [H, W] map; output [2, H, W]
    /// stacking the real and imaginary parts.
    pub fn fft2(&mut self, x: VarId) -> Result<VarId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::invalid("fft2", format!("expected [H,W], got {xs:?}")));
        }
        let (re, im) = super::fft::fft2_real(self.value(x).data(), xs[0], xs[1])?;
        let mut data = re;
        data.extend_from_slice(&im);
        let value = Tensor::new(vec![2, xs[0], xs[1]], data)?;
        let rg = self.rg(x);
        self.push("fft2", value, Op::Fft2(x), rg)
    }

    /// Record a fused op with an externally implemented backward rule.
    pub fn custom(&mut self, inputs: Vec<VarId>, value: Tensor<T>, rule: Box<dyn CustomGrad<T>>) -> Result<VarId> {
        let rg = inputs.iter().any(|&i| self.rg(i));
        let name = rule.name();
        value.check_finite(name)?;
        Ok(self.push_unchecked(value, Op::Custom { inputs, rule }, rg))
    }

    // -- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar output. Returns one gradient buffer per
    /// requires-grad node reached from `loss`.
    pub fn backward(&self, loss: VarId) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid("backward", format!("output must be scalar, numel = {}", self.value(loss).numel())));
        }
        let mut slots: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        slots[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            // Leaves keep their slot (that is the result); interior grads are
            // consumed here and freed.
            let g = if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            } else {
                match slots[i].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            self.backprop_node(i, &g, &mut slots)?;
        }
        Ok(Gradients { slots })
    }

    fn accum(&self, slots: &mut [Option<Vec<T>>], id: VarId, contrib: &[T]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut slots[id.0] {
            Some(buf) => {
                debug_assert_eq!(buf.len(), contrib.len());
                for (d, &s) in buf.iter_mut().zip(contrib) {
                    *d += s;
                }
            }
            slot => *slot = Some(contrib.to_vec()),
        }
    }

    fn accum_owned(&self, slots: &mut [Option<Vec<T>>], id: VarId, contrib: Vec<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut slots[id.0] {
            Some(buf) => {
                debug_assert_eq!(buf.len(), contrib.len());
                for (d, s) in buf.iter_mut().zip(contrib) {
                    *d += s;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn backprop_node(&self, i: usize, g: &[T], slots: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(slots, *a, g);
                self.accum(slots, *b, g);
            }
            Op::Sub(a, b) => {
                self.accum(slots, *a, g);
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                self.accum_owned(slots, *b, neg);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let da: Vec<T> = g.iter().zip(bv).map(|(&gv, &b)| gv * b).collect();
                let db: Vec<T> = g.iter().zip(av).map(|(&gv, &a)| gv * a).collect();
                self.accum_owned(slots, *a, da);
                self.accum_owned(slots, *b, db);
            }
            Op::Scale(a, c) => {
                let da: Vec<T> = g.iter().map(|&gv| gv * *c).collect();
                self.accum_owned(slots, *a, da);
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                let da: Vec<T> = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &x)| {
                        let s = sigmoid(x);
                        gv * (s + x * s * (T::one() - s))
                    })
                    .collect();
                self.accum_owned(slots, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let da: Vec<T> = g.iter().zip(y).map(|(&gv, &s)| gv * s * (T::one() - s)).collect();
                self.accum_owned(slots, *a, da);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let da: Vec<T> = g.iter().zip(x).map(|(&gv, &x)| gv * gelu_grad(x)).collect();
                self.accum_owned(slots, *a, da);
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                let da: Vec<T> = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &x)| {
                        if x > T::zero() {
                            gv
                        } else if x < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accum_owned(slots, *a, da);
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                let gv = g[0] / T::from_usize(n).unwrap();
                self.accum_owned(slots, *a, vec![gv; n]);
            }
            Op::Reshape(a) => {
                self.accum(slots, *a, g);
            }
            Op::Transpose2(a, m, n) => {
                // node value is [n, m]; scatter back to [m, n]
                let mut da = vec![T::zero(); m * n];
                for j in 0..*n {
                    for i2 in 0..*m {
                        da[i2 * n + j] = g[j * m + i2];
                    }
                }
                self.accum_owned(slots, *a, da);
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (cout, cin) = (ws[0], ws[1]);
                let rows = self.value(*x).numel() / cin;
                let (dx, dw, db) = ops::linear_bwd(self.value(*x).data(), self.value(*w).data(), g, rows, cin, cout);
                self.accum_owned(slots, *x, dx);
                self.accum_owned(slots, *w, dw);
                self.accum_owned(slots, *b, db);
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let c = *self.shape(*x).last().unwrap();
                let rows = self.value(*x).numel() / c;
                let (dx, dgamma, dbeta) =
                    ops::layer_norm_bwd(self.value(*x).data(), self.value(*gamma).data(), mean, rstd, g, rows, c);
                self.accum_owned(slots, *x, dx);
                self.accum_owned(slots, *gamma, dgamma);
                self.accum_owned(slots, *beta, dbeta);
            }
            Op::Conv2d { x, k, b, stride, pad } => {
                let xs = self.shape(*x);
                let ks = self.shape(*k);
                let (dx, dk, db) = ops::conv2d_bwd(
                    self.value(*x).data(),
                    self.value(*k).data(),
                    g,
                    xs[0],
                    xs[1],
                    xs[2],
                    ks[0],
                    ks[2],
                    ks[3],
                    *stride,
                    *pad,
                );
                self.accum_owned(slots, *x, dx);
                self.accum_owned(slots, *k, dk);
                if let Some(b) = b {
                    self.accum_owned(slots, *b, db);
                }
            }
            Op::DwConv2d { x, k, b, pad } => {
                let xs = self.shape(*x);
                let ks = self.shape(*k);
                let (dx, dk, db) = ops::dwconv2d_bwd(
                    self.value(*x).data(),
                    self.value(*k).data(),
                    g,
                    xs[0],
                    xs[1],
                    xs[2],
                    ks[2],
                    ks[3],
                    *pad,
                );
                self.accum_owned(slots, *x, dx);
                self.accum_owned(slots, *k, dk);
                if let Some(b) = b {
                    self.accum_owned(slots, *b, db);
                }
            }
            Op::Bilinear2x(a) => {
                let xs = self.shape(*a);
                let da = ops::bilinear2x_bwd(g, xs[0], xs[1], xs[2]);
                self.accum_owned(slots, *a, da);
            }
            Op::Pad { x, spec, reflect } => {
                let xs = self.shape(*x);
                let da = ops::pad_bwd(g, xs[0], xs[1], xs[2], spec, *reflect);
                self.accum_owned(slots, *x, da);
            }
            Op::Crop { x, top, left } => {
                let xs = self.shape(*x);
                let os = node.value.shape();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (oh, ow) = (os[1], os[2]);
                let mut da = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for x2 in 0..ow {
                            da[(ch * h + top + y) * w + left + x2] = g[(ch * oh + y) * ow + x2];
                        }
                    }
                }
                self.accum_owned(slots, *x, da);
            }
            Op::ConcatCh(a, b) => {
                let na = self.value(*a).numel();
                self.accum(slots, *a, &g[..na]);
                self.accum(slots, *b, &g[na..]);
            }
            Op::SliceCh { x, start } => {
                let xs = self.shape(*x);
                let hw = xs[1] * xs[2];
                let mut da = vec![T::zero(); xs[0] * hw];
                da[start * hw..start * hw + g.len()].copy_from_slice(g);
                self.accum_owned(slots, *x, da);
            }
            Op::GatherFlat { x, map } => {
                let mut da = vec![T::zero(); self.value(*x).numel()];
                for (o, &src) in map.iter().enumerate() {
                    da[src] += g[o];
                }
                self.accum_owned(slots, *x, da);
            }
            Op::GatherCh { x, idx } => {
                let xs = self.shape(*x);
                let hw = xs[1] * xs[2];
                let mut da = vec![T::zero(); xs[0] * hw];
                for (k, &src) in idx.iter().enumerate() {
                    let gs = &g[k * hw..(k + 1) * hw];
                    let ds = &mut da[src * hw..(src + 1) * hw];
                    for (d, &gv) in ds.iter_mut().zip(gs) {
                        *d += gv;
                    }
                }
                self.accum_owned(slots, *x, da);
            }
            Op::Fft2(x) => {
                let xs = self.shape(*x);
                let (h, w) = (xs[0], xs[1]);
                let da = super::fft::fft2_adjoint(&g[..h * w], &g[h * w..], h, w)?;
                self.accum_owned(slots, *x, da);
            }
            Op::Custom { inputs, rule } => {
                let grads = rule.input_grads(g);
                debug_assert_eq!(grads.len(), inputs.len());
                for (id, gi) in inputs.iter().zip(grads) {
                    if let Some(gi) = gi {
                        self.accum_owned(slots, *id, gi);
                    }
                }
            }
        }
        Ok(())
    }
}

// -- scalar activation helpers ------------------------------------------------

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// tanh-form GELU.
fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    let dinner = c * (T::one() + T::from_f64(3.0) * k * x * x);
    half * (T::one() + t) + half * x * sech2 * dinner
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    let hi = T::from_f64(20.0);
    if x > hi {
        x
    } else if x < -hi {
        x.exp()
    } else {
        (T::one() + x.exp()).ln()
    }
}

/// Inverse of softplus on positive inputs.
pub(crate) fn softplus_inv<T: Scalar>(y: T) -> T {
    let hi = T::from_f64(20.0);
    if y > hi {
        y
    } else {
        (y.exp() - T::one()).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_use_accumulates_gradient() {
        // z = mean(x + x): dz/dx = 2/n
        let mut t = Tape::<f64>::new();
        let x = t.input_grad(Tensor::from_fn(&[4], |i| i as f64));
        let s = t.add(x, x).unwrap();
        let z = t.mean_all(s).unwrap();
        let grads = t.backward(z).unwrap();
        for &g in grads.get(x).unwrap() {
            assert!((g - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut t = Tape::<f64>::new();
        let x = t.input_grad(Tensor::zeros(&[4]));
        let y = t.silu(x).unwrap();
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn reset_preserves_parameter_values() {
        let mut t = Tape::<f32>::new();
        let p = t.param(Tensor::from_fn(&[3], |i| i as f32));
        t.seal_params();
        let x = t.input(Tensor::zeros(&[3]));
        let _ = t.add(p, x).unwrap();
        assert_eq!(t.len(), 3);
        t.reset();
        assert_eq!(t.len(), 1);
        assert_eq!(t.value(p).data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn nan_is_rejected_immediately() {
        let mut t = Tape::<f32>::new();
        let a = t.input(Tensor::full(&[2], f32::MAX));
        let b = t.input(Tensor::full(&[2], f32::MAX));
        // overflow to +inf
        let r = t.add(a, b);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn silu_and_sigmoid_values() {
        let mut t = Tape::<f64>::new();
        let x = t.input(Tensor::new(vec![3], vec![0.0, 20.0, -20.0]).unwrap());
        let s = t.silu(x).unwrap();
        let sg = t.sigmoid(x).unwrap();
        assert_eq!(t.value(s).data()[0], 0.0);
        // silu(x)/x -> 1 for large x
        assert!((t.value(s).data()[1] / 20.0 - 1.0).abs() < 1e-6);
        assert!((t.value(sg).data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut t = Tape::<f64>::new();
        let a = t.input(Tensor::from_fn(&[2, 2, 2], |i| i as f64));
        let b = t.input(Tensor::from_fn(&[1, 2, 2], |i| (i + 100) as f64));
        let c = t.concat_ch(a, b).unwrap();
        assert_eq!(t.shape(c), &[3, 2, 2]);
        let s = t.slice_ch(c, 2, 1).unwrap();
        assert_eq!(t.value(s).data(), t.value(b).data());
    }
}
