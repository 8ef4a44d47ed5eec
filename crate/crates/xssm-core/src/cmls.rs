//! Cross-Modal Local Scanning: cluster semantically correlated channels
//! across the two modalities (rearrange), impose local inductive bias
//! (patchify), and interleave both modalities into one token stream for the
//! selective scan.
//!
//! Layout produced by [`sequence_perm`], with matched pairs in descending
//! match-score order:
//!
//!   pair 0: d-patch 0, r-patch 0, d-patch 1, r-patch 1, ...
//!   pair 1: d-patch 0, r-patch 0, ...
//!
//! Patches raster over the patch grid; pixels raster within each patch.
//! Tokens are scalars, so one matched pair contributes 2*(H/p)*(W/p)*p*p
//! tokens and the full sequence has L = 2*C*H*W.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};
use std::sync::Arc;

/// One-to-one channel pairing between the modalities, strongest match first.
#[derive(Debug, Clone)]
pub struct ChannelMatching<T> {
    /// (depth_channel, rgb_channel), sorted by descending score.
    pub pairs: Vec<(usize, usize)>,
    /// Matching similarity per pair, same order.
    pub scores: Vec<T>,
}

/// Cosine similarity of mean-centered flattened channel maps. Zero-norm
/// (constant) channels get similarity 0 against everything.
fn centered_channels<T: Scalar>(f: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let c = f.shape()[0];
    let hw = f.numel() / c;
    let mut centered = f.data().to_vec();
    let mut norms = vec![T::zero(); c];
    let hw_t = T::from_usize(hw).unwrap();
    for ch in 0..c {
        let row = &mut centered[ch * hw..(ch + 1) * hw];
        let mean = row.iter().copied().sum::<T>() / hw_t;
        let mut sq = T::zero();
        for v in row.iter_mut() {
            *v -= mean;
            sq += *v * *v;
        }
        norms[ch] = sq.sqrt();
    }
    (centered, norms)
}

/// Greedy maximum-similarity one-to-one matching between the channels of the
/// two feature maps. Ties break toward the lowest (depth, rgb) index pair.
pub fn compute_matching<T: Scalar>(f_depth: &Tensor<T>, f_rgb: &Tensor<T>) -> Result<ChannelMatching<T>> {
    if f_depth.shape() != f_rgb.shape() || f_depth.shape().len() != 3 {
        return Err(Error::ShapeMismatch {
            context: "compute_matching",
            expected: f_depth.shape().to_vec(),
            got: f_rgb.shape().to_vec(),
        });
    }
    let c = f_depth.shape()[0];
    let hw = f_depth.numel() / c;
    let (cd, nd) = centered_channels(f_depth);
    let (cr, nr) = centered_channels(f_rgb);

    let mut sim = vec![T::zero(); c * c];
    for i in 0..c {
        for j in 0..c {
            let denom = nd[i] * nr[j];
            if denom > T::zero() {
                let mut dot = T::zero();
                let a = &cd[i * hw..(i + 1) * hw];
                let b = &cr[j * hw..(j + 1) * hw];
                for k in 0..hw {
                    dot += a[k] * b[k];
                }
                sim[i * c + j] = dot / denom;
            }
        }
    }

    let mut used_d = vec![false; c];
    let mut used_r = vec![false; c];
    let mut pairs = Vec::with_capacity(c);
    let mut scores = Vec::with_capacity(c);
    for _ in 0..c {
        let mut best: Option<(usize, usize, T)> = None;
        for i in 0..c {
            if used_d[i] {
                continue;
            }
            for j in 0..c {
                if used_r[j] {
                    continue;
                }
                let s = sim[i * c + j];
                // strict > keeps the lowest (i, j) on ties
                if best.map_or(true, |(_, _, bs)| s > bs) {
                    best = Some((i, j, s));
                }
            }
        }
        let (i, j, s) = best.expect("c unmatched pairs remain");
        used_d[i] = true;
        used_r[j] = true;
        pairs.push((i, j));
        scores.push(s);
    }
    Ok(ChannelMatching { pairs, scores })
}

impl<T: Scalar> ChannelMatching<T> {
    /// Both index lists must be permutations of 0..C.
    pub fn is_valid(&self, c: usize) -> bool {
        let mut seen_d = vec![false; c];
        let mut seen_r = vec![false; c];
        if self.pairs.len() != c || self.scores.len() != c {
            return false;
        }
        for &(i, j) in &self.pairs {
            if i >= c || j >= c || seen_d[i] || seen_r[j] {
                return false;
            }
            seen_d[i] = true;
            seen_r[j] = true;
        }
        self.scores.windows(2).all(|w| w[0] >= w[1])
    }
}

// ---------------------------------------------------------------------------
// patchify
// ---------------------------------------------------------------------------

/// Splits each channel into non-overlapping p x p patches:
/// [C, H, W] -> [C, (H/p)*(W/p), p*p], patches raster over the patch grid,
/// pixels raster within each patch.
pub fn patchify<T: Scalar>(f: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let s = f.shape();
    if s.len() != 3 {
        return Err(Error::invalid("patchify", format!("expected [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::invalid("patchify", format!("patch size {p} must divide {h}x{w}")));
    }
    let (gh, gw) = (h / p, w / p);
    let np = gh * gw;
    let mut out = vec![T::zero(); c * h * w];
    let x = f.data();
    for ch in 0..c {
        for q in 0..np {
            let (qy, qx) = (q / gw, q % gw);
            for t in 0..p * p {
                let (ty, tx) = (t / p, t % p);
                out[(ch * np + q) * p * p + t] = x[(ch * h + qy * p + ty) * w + qx * p + tx];
            }
        }
    }
    Tensor::new(vec![c, np, p * p], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(f: &Tensor<T>, h: usize, w: usize, p: usize) -> Result<Tensor<T>> {
    let s = f.shape();
    if s.len() != 3 || p == 0 || h % p != 0 || w % p != 0 || s[1] != (h / p) * (w / p) || s[2] != p * p {
        return Err(Error::invalid("unpatchify", format!("shape {s:?} does not fit {h}x{w} with p={p}")));
    }
    let c = s[0];
    let (gh, gw) = (h / p, w / p);
    let np = gh * gw;
    let mut out = vec![T::zero(); c * h * w];
    let x = f.data();
    for ch in 0..c {
        for q in 0..np {
            let (qy, qx) = (q / gw, q % gw);
            for t in 0..p * p {
                let (ty, tx) = (t / p, t % p);
                out[(ch * h + qy * p + ty) * w + qx * p + tx] = x[(ch * np + q) * p * p + t];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

// ---------------------------------------------------------------------------
// sequence layout
// ---------------------------------------------------------------------------

/// Token order of one interleaved cross-modal sequence, plus the inverse
/// permutation needed to restore spatial layout.
#[derive(Debug, Clone)]
pub struct ScanLayout {
    /// perm[token] = flat index into the stacked [2C, H, W] buffer
    /// (depth channels first, then rgb).
    pub perm: Arc<Vec<usize>>,
    /// inverse: inv[flat] = token position.
    pub inv: Arc<Vec<usize>>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl ScanLayout {
    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }
}

/// Builds the token permutation for a matching over [C, H, W] maps.
pub fn sequence_perm<T: Scalar>(matching: &ChannelMatching<T>, c: usize, h: usize, w: usize, p: usize) -> Result<ScanLayout> {
    if !matching.is_valid(c) {
        return Err(Error::invalid("sequence_perm", "matching is not a valid permutation pairing"));
    }
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::invalid("sequence_perm", format!("patch size {p} must divide {h}x{w}")));
    }
    let (gh, gw) = (h / p, w / p);
    let np = gh * gw;
    let plane = h * w;
    let mut perm = Vec::with_capacity(2 * c * plane);
    for &(dch, rch) in &matching.pairs {
        for q in 0..np {
            let (qy, qx) = (q / gw, q % gw);
            for (modality, ch) in [(0usize, dch), (1usize, rch)] {
                let base = modality * c * plane + ch * plane;
                for t in 0..p * p {
                    let (ty, tx) = (t / p, t % p);
                    perm.push(base + (qy * p + ty) * w + qx * p + tx);
                }
            }
        }
    }
    let mut inv = vec![0usize; perm.len()];
    for (tok, &src) in perm.iter().enumerate() {
        inv[src] = tok;
    }
    Ok(ScanLayout { perm: Arc::new(perm), inv: Arc::new(inv), channels: c, height: h, width: w, patch: p })
}

/// Token stream plus the layout needed to undo it.
#[derive(Debug, Clone)]
pub struct ScanSequence<T: Scalar> {
    /// [L, 1] scalar tokens.
    pub tokens: Tensor<T>,
    pub layout: ScanLayout,
}

/// Assembles the interleaved sequence from both feature maps (pure tensor
/// version; the tape composition lives in the ISSM block).
pub fn build_sequence<T: Scalar>(
    f_depth: &Tensor<T>,
    f_rgb: &Tensor<T>,
    matching: &ChannelMatching<T>,
    p: usize,
) -> Result<ScanSequence<T>> {
    if f_depth.shape() != f_rgb.shape() || f_depth.shape().len() != 3 {
        return Err(Error::ShapeMismatch {
            context: "build_sequence",
            expected: f_depth.shape().to_vec(),
            got: f_rgb.shape().to_vec(),
        });
    }
    let (c, h, w) = (f_depth.shape()[0], f_depth.shape()[1], f_depth.shape()[2]);
    let layout = sequence_perm(matching, c, h, w, p)?;
    let mut stacked = Vec::with_capacity(2 * c * h * w);
    stacked.extend_from_slice(f_depth.data());
    stacked.extend_from_slice(f_rgb.data());
    let tokens: Vec<T> = layout.perm.iter().map(|&i| stacked[i]).collect();
    let l = tokens.len();
    Ok(ScanSequence { tokens: Tensor::new(vec![l, 1], tokens)?, layout })
}

/// Exact inverse of [`build_sequence`]'s layout.
pub fn restore<T: Scalar>(tokens: &Tensor<T>, layout: &ScanLayout) -> Result<(Tensor<T>, Tensor<T>)> {
    if tokens.numel() != layout.len() {
        return Err(Error::ShapeMismatch {
            context: "restore",
            expected: vec![layout.len()],
            got: vec![tokens.numel()],
        });
    }
    let (c, h, w) = (layout.channels, layout.height, layout.width);
    let plane = h * w;
    let mut stacked = vec![T::zero(); 2 * c * plane];
    for (tok, &dst) in layout.perm.iter().enumerate() {
        stacked[dst] = tokens.data()[tok];
    }
    let rgb = stacked.split_off(c * plane);
    Ok((Tensor::new(vec![c, h, w], stacked)?, Tensor::new(vec![c, h, w], rgb)?))
}
