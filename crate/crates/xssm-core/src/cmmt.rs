//! Cross-Modal Matching Transform: channel-level alignment that gathers the
//! top-C/r most similar auxiliary channels and fuses them into the primary
//! modality through a sigmoid-gated convolution, applied symmetrically in
//! both directions.

use crate::error::{Error, Result};
use crate::layers::{Conv2dLayer, ParamRegistry};
use crate::numerics::init::Rng64;
use crate::numerics::tape::{Tape, VarId};
use crate::numerics::tensor::{Scalar, Tensor};
use std::sync::Arc;

/// Parameters of one fusion direction (one primary modality).
#[derive(Debug, Clone, Copy)]
pub struct CmmtParams {
    /// 3x3 pre-convs enriching local context, one per modality role.
    pub pre_primary: Conv2dLayer,
    pub pre_aux: Conv2dLayer,
    /// 1x1 convs on the concatenated fusion stack.
    pub gate: Conv2dLayer,
    pub value: Conv2dLayer,
    /// 3x3 output conv.
    pub out: Conv2dLayer,
    /// Squeeze factor: C/r auxiliary channels are gathered.
    pub squeeze: usize,
    pub channels: usize,
}

impl CmmtParams {
    pub fn new<T: Scalar>(
        tape: &mut Tape<T>,
        reg: &mut ParamRegistry,
        name: &str,
        c: usize,
        squeeze: usize,
        rng: &mut Rng64,
    ) -> Result<Self> {
        if squeeze == 0 || c % squeeze != 0 {
            return Err(Error::invalid("CmmtParams", format!("squeeze factor {squeeze} must divide C = {c}")));
        }
        let fused = c + c / squeeze;
        Ok(Self {
            pre_primary: Conv2dLayer::new(tape, reg, &format!("{name}.pre_primary"), c, c, 3, 1, rng),
            pre_aux: Conv2dLayer::new(tape, reg, &format!("{name}.pre_aux"), c, c, 3, 1, rng),
            gate: Conv2dLayer::new(tape, reg, &format!("{name}.gate"), fused, c, 1, 1, rng),
            value: Conv2dLayer::new(tape, reg, &format!("{name}.value"), fused, c, 1, 1, rng),
            out: Conv2dLayer::new(tape, reg, &format!("{name}.out"), c, c, 3, 1, rng),
            squeeze,
            channels: c,
        })
    }
}

/// M[i][j] = negative Euclidean distance between primary channel i and aux
/// channel j over flattened spatial positions (higher = more similar).
/// Computed through the Gram expansion ||p||^2 + ||a||^2 - 2 p.a; the tests
/// hold it against a direct per-pair oracle.
pub fn similarity_matrix<T: Scalar>(primary: &Tensor<T>, aux: &Tensor<T>) -> Result<Tensor<T>> {
    if primary.shape() != aux.shape() || primary.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            context: "similarity_matrix",
            expected: primary.shape().to_vec(),
            got: aux.shape().to_vec(),
        });
    }
    let (c, hw) = (primary.shape()[0], primary.shape()[1]);
    let sq = |f: &Tensor<T>| -> Vec<T> {
        (0..c)
            .map(|i| f.data()[i * hw..(i + 1) * hw].iter().map(|&v| v * v).sum())
            .collect()
    };
    let (np, na) = (sq(primary), sq(aux));
    let mut m = vec![T::zero(); c * c];
    for i in 0..c {
        let pi = &primary.data()[i * hw..(i + 1) * hw];
        for j in 0..c {
            let aj = &aux.data()[j * hw..(j + 1) * hw];
            let mut dot = T::zero();
            for k in 0..hw {
                dot += pi[k] * aj[k];
            }
            let d2 = (np[i] + na[j] - (dot + dot)).max(T::zero());
            m[i * c + j] = -d2.sqrt();
        }
    }
    Tensor::new(vec![c, c], m)
}

/// For each primary channel take its best-matching aux channel (lowest index
/// on ties), then order those picks by descending similarity (lowest primary
/// index on ties). Duplicate aux indices are allowed.
pub fn top1_sort<T: Scalar>(m: &Tensor<T>) -> Result<Vec<usize>> {
    let s = m.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::invalid("top1_sort", format!("expected square matrix, got {s:?}")));
    }
    let c = s[0];
    let mut picks: Vec<(usize, usize, T)> = (0..c)
        .map(|i| {
            let row = &m.data()[i * c..(i + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            (i, best, row[best])
        })
        .collect();
    // stable sort keeps ties in ascending primary order
    picks.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
    Ok(picks.into_iter().map(|(_, j, _)| j).collect())
}

/// One fusion direction. Selection indices are values of the forward pass;
/// gradients flow through the gathered channels only.
pub fn cmmt_forward<T: Scalar>(tape: &mut Tape<T>, f_primary: VarId, f_aux: VarId, p: &CmmtParams) -> Result<VarId> {
    cmmt_forward_traced(tape, f_primary, f_aux, p).map(|(out, _)| out)
}

/// Same as [`cmmt_forward`], also reporting (S, selected prefix).
pub fn cmmt_forward_traced<T: Scalar>(
    tape: &mut Tape<T>,
    f_primary: VarId,
    f_aux: VarId,
    p: &CmmtParams,
) -> Result<(VarId, Vec<usize>)> {
    let s = tape.shape(f_primary).to_vec();
    if s != tape.shape(f_aux) {
        return Err(Error::ShapeMismatch { context: "cmmt_forward", expected: s, got: tape.shape(f_aux).to_vec() });
    }
    if s.len() != 3 || s[0] != p.channels {
        return Err(Error::invalid("cmmt_forward", format!("expected [{}, H, W], got {s:?}", p.channels)));
    }
    let c = p.channels;
    let keep = c / p.squeeze;

    let hat_p = p.pre_primary.forward(tape, f_primary)?;
    let hat_a = p.pre_aux.forward(tape, f_aux)?;

    let hw = s[1] * s[2];
    let flat_p = tape.value(hat_p).clone().reshaped(&[c, hw])?;
    let flat_a = tape.value(hat_a).clone().reshaped(&[c, hw])?;
    let m = similarity_matrix(&flat_p, &flat_a)?;
    let order = top1_sort(&m)?;

    let selected: Vec<usize> = order[..keep].to_vec();
    let gathered = tape.gather_ch(hat_a, Arc::new(selected))?;
    let fusion = tape.concat_ch(gathered, hat_p)?;
    let gate = p.gate.forward(tape, fusion)?;
    let gate = tape.sigmoid(gate)?;
    let val = p.value.forward(tape, fusion)?;
    let fused = tape.mul(gate, val)?;
    let out = p.out.forward(tape, fused)?;
    Ok((out, order))
}

/// Both directions, each from the original inputs.
pub fn cmmt_symmetric<T: Scalar>(
    tape: &mut Tape<T>,
    f_depth: VarId,
    f_rgb: VarId,
    params_d: &CmmtParams,
    params_r: &CmmtParams,
) -> Result<(VarId, VarId)> {
    let out_d = cmmt_forward(tape, f_depth, f_rgb, params_d)?;
    let out_r = cmmt_forward(tape, f_rgb, f_depth, params_r)?;
    Ok((out_d, out_r))
}
