//! Gated-Dconv feed-forward network: layer norm, 1x1 expansion split into two
//! depthwise-convolved branches, GELU gating, 1x1 projection back, with the
//! identity skip around the whole transform.

use crate::error::{Error, Result};
use crate::layers::{to_map, to_rows, Conv2dLayer, DwConv2dLayer, LayerNormLayer, ParamRegistry};
use crate::numerics::init::Rng64;
use crate::numerics::tape::{Tape, VarId};
use crate::numerics::tensor::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct GdfnParams {
    pub ln: LayerNormLayer,
    /// 1x1 conv C -> 2*gamma*C
    pub expand: Conv2dLayer,
    pub dw_gate: DwConv2dLayer,
    pub dw_value: DwConv2dLayer,
    /// 1x1 conv gamma*C -> C
    pub project: Conv2dLayer,
    pub channels: usize,
    pub gamma: usize,
}

impl GdfnParams {
    pub fn new<T: Scalar>(
        tape: &mut Tape<T>,
        reg: &mut ParamRegistry,
        name: &str,
        c: usize,
        gamma: usize,
        rng: &mut Rng64,
    ) -> Self {
        let hidden = gamma * c;
        Self {
            ln: LayerNormLayer::new(tape, reg, &format!("{name}.ln"), c),
            expand: Conv2dLayer::new(tape, reg, &format!("{name}.expand"), c, 2 * hidden, 1, 1, rng),
            dw_gate: DwConv2dLayer::new(tape, reg, &format!("{name}.dw_gate"), hidden, 3, rng),
            dw_value: DwConv2dLayer::new(tape, reg, &format!("{name}.dw_value"), hidden, 3, rng),
            project: Conv2dLayer::new(tape, reg, &format!("{name}.project"), hidden, c, 1, 1, rng),
            channels: c,
            gamma,
        }
    }
}

pub fn gdfn_forward<T: Scalar>(tape: &mut Tape<T>, x: VarId, p: &GdfnParams) -> Result<VarId> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[0] != p.channels {
        return Err(Error::invalid("gdfn_forward", format!("expected [{}, H, W], got {s:?}", p.channels)));
    }
    let (h, w) = (s[1], s[2]);
    let hidden = p.gamma * p.channels;
    let rows = to_rows(tape, x)?;
    let ln = p.ln.forward(tape, rows)?;
    let ln_map = to_map(tape, ln, h, w)?;
    let e = p.expand.forward(tape, ln_map)?;
    let b_gate = tape.slice_ch(e, 0, hidden)?;
    let b_value = tape.slice_ch(e, hidden, hidden)?;
    let g = p.dw_gate.forward(tape, b_gate)?;
    let g = tape.gelu(g)?;
    let v = p.dw_value.forward(tape, b_value)?;
    let fused = tape.mul(g, v)?;
    let out = p.project.forward(tape, fused)?;
    tape.add(x, out)
}
