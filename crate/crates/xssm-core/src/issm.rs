//! Interactive State Space Model block: dual-modality input projection,
//! cross-modal local scanning through a shared S6, and gated output
//! projection.
//!
//! Per modality, with F the block input and G the scan output routed back to
//! that modality:
//!
//!   F_hat = SiLU(DWConv(Linear(LN(F))))      (C -> expand*C)
//!   F_w   = Linear_gate(LN(F))               (C -> expand*C)
//!   F_out = Linear_out(LN_out(G) * F_w)      (expand*C -> C)
//!
//! The two projected maps are interleaved into one token stream by the CMLS
//! layout and scanned once. Which modality leads inside each matched pair is
//! decided by content (larger projected-map L1 norm first, depth on ties), so
//! swapping the (depth, rgb) arguments together with their branch parameters
//! swaps the outputs exactly.

use crate::cmls;
use crate::error::{Error, Result};
use crate::layers::{to_map, to_rows, DwConv2dLayer, LayerNormLayer, LinearLayer, ParamRegistry};
use crate::numerics::init::Rng64;
use crate::numerics::tape::{Tape, VarId};
use crate::numerics::tensor::Scalar;
use crate::s6::{S6Dims, S6ParamIds, S6Params};

/// One modality's projection/gate parameters.
#[derive(Debug, Clone, Copy)]
pub struct IssmBranch {
    pub ln_in: LayerNormLayer,
    pub lin_in: LinearLayer,
    pub dconv: DwConv2dLayer,
    pub lin_gate: LinearLayer,
    pub ln_out: LayerNormLayer,
    pub lin_out: LinearLayer,
}

impl IssmBranch {
    fn new<T: Scalar>(
        tape: &mut Tape<T>,
        reg: &mut ParamRegistry,
        name: &str,
        c: usize,
        inner: usize,
        rng: &mut Rng64,
    ) -> Self {
        Self {
            ln_in: LayerNormLayer::new(tape, reg, &format!("{name}.ln_in"), c),
            lin_in: LinearLayer::new(tape, reg, &format!("{name}.lin_in"), c, inner, rng),
            dconv: DwConv2dLayer::new(tape, reg, &format!("{name}.dconv"), inner, 3, rng),
            lin_gate: LinearLayer::new(tape, reg, &format!("{name}.lin_gate"), c, inner, rng),
            ln_out: LayerNormLayer::new(tape, reg, &format!("{name}.ln_out"), inner),
            lin_out: LinearLayer::new(tape, reg, &format!("{name}.lin_out"), inner, c, rng),
        }
    }
}

/// Full block: two branches plus the shared scan.
#[derive(Debug, Clone, Copy)]
pub struct IssmParams {
    pub depth: IssmBranch,
    pub rgb: IssmBranch,
    pub s6: S6ParamIds,
    pub channels: usize,
    pub expand: usize,
    pub patch: usize,
}

impl IssmParams {
    pub fn new<T: Scalar>(
        tape: &mut Tape<T>,
        reg: &mut ParamRegistry,
        name: &str,
        c: usize,
        expand: usize,
        nstate: usize,
        patch: usize,
        rng: &mut Rng64,
    ) -> Self {
        assert!(expand >= 1, "expansion factor must be >= 1");
        let inner = expand * c;
        let depth = IssmBranch::new(tape, reg, &format!("{name}.depth"), c, inner, rng);
        let rgb = IssmBranch::new(tape, reg, &format!("{name}.rgb"), c, inner, rng);
        // one scalar token stream, shared between the modalities
        let s6p: S6Params<T> = S6Params::init(S6Dims { din: 1, nstate }, rng);
        let s6 = S6ParamIds {
            a_log: tape.param(s6p.a_log),
            w_b: tape.param(s6p.w_b),
            w_c: tape.param(s6p.w_c),
            w_dt: tape.param(s6p.w_dt),
            b_dt: tape.param(s6p.b_dt),
            d_skip: tape.param(s6p.d_skip),
        };
        reg.add(format!("{name}.s6.a_log"), s6.a_log);
        reg.add(format!("{name}.s6.w_b"), s6.w_b);
        reg.add(format!("{name}.s6.w_c"), s6.w_c);
        reg.add(format!("{name}.s6.w_dt"), s6.w_dt);
        reg.add(format!("{name}.s6.b_dt"), s6.b_dt);
        reg.add(format!("{name}.s6.d_skip"), s6.d_skip);
        Self { depth, rgb, s6, channels: c, expand, patch }
    }
}

/// F_hat = SiLU(DWConv(Linear(LN(F)))): [C, H, W] -> [expand*C, H, W].
pub fn input_project<T: Scalar>(tape: &mut Tape<T>, x: VarId, branch: &IssmBranch) -> Result<VarId> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::invalid("input_project", format!("expected [C,H,W], got {s:?}")));
    }
    let rows = to_rows(tape, x)?;
    let ln = branch.ln_in.forward(tape, rows)?;
    let lin = branch.lin_in.forward(tape, ln)?;
    let map = to_map(tape, lin, s[1], s[2])?;
    let dc = branch.dconv.forward(tape, map)?;
    tape.silu(dc)
}

/// Gate stream F_w = Linear_gate(LN(F)), kept in row layout [H*W, expand*C].
fn gate_rows<T: Scalar>(tape: &mut Tape<T>, x: VarId, branch: &IssmBranch) -> Result<VarId> {
    let rows = to_rows(tape, x)?;
    let ln = branch.ln_in.forward(tape, rows)?;
    branch.lin_gate.forward(tape, ln)
}

/// Gated output projection: F_out = Linear_out(LN_out(G) * F_w).
fn project_out<T: Scalar>(
    tape: &mut Tape<T>,
    scanned: VarId,
    gate: VarId,
    branch: &IssmBranch,
    h: usize,
    w: usize,
) -> Result<VarId> {
    let rows = to_rows(tape, scanned)?;
    let ln = branch.ln_out.forward(tape, rows)?;
    let gated = tape.mul(ln, gate)?;
    let out = branch.lin_out.forward(tape, gated)?;
    to_map(tape, out, h, w)
}

/// Per-forward routing record, for debug dumps.
#[derive(Debug, Clone)]
pub struct IssmTrace {
    /// (primary_channel, partner_channel, score) in scan order; "primary" is
    /// the modality that leads inside each pair.
    pub matching: Vec<(usize, usize, f64)>,
    pub depth_leads: bool,
}

/// Runs the block on one (depth, rgb) feature pair. Outputs keep the input
/// shape; the residual add is the caller's.
pub fn issm_forward<T: Scalar>(
    tape: &mut Tape<T>,
    f_depth: VarId,
    f_rgb: VarId,
    p: &IssmParams,
    trace: Option<&mut Vec<IssmTrace>>,
) -> Result<(VarId, VarId)> {
    let s = tape.shape(f_depth).to_vec();
    if s != tape.shape(f_rgb) {
        return Err(Error::ShapeMismatch { context: "issm_forward", expected: s, got: tape.shape(f_rgb).to_vec() });
    }
    if s.len() != 3 || s[0] != p.channels {
        return Err(Error::invalid("issm_forward", format!("expected [{}, H, W], got {s:?}", p.channels)));
    }
    let (h, w) = (s[1], s[2]);
    let inner = p.expand * p.channels;

    let fhat_d = input_project(tape, f_depth, &p.depth)?;
    let fhat_r = input_project(tape, f_rgb, &p.rgb)?;

    // Content-canonical slot order: the stream with the larger projected-map
    // L1 norm leads inside each pair. This keeps the block exactly symmetric
    // under a joint (arguments, branch parameters) swap.
    let norm = |t: &Tape<T>, id: VarId| t.value(id).data().iter().fold(T::zero(), |acc, &v| acc + v.abs());
    let depth_leads = norm(tape, fhat_d) >= norm(tape, fhat_r);
    let (lead, follow) = if depth_leads { (fhat_d, fhat_r) } else { (fhat_r, fhat_d) };

    let matching = cmls::compute_matching(tape.value(lead), tape.value(follow))?;
    let layout = cmls::sequence_perm(&matching, inner, h, w, p.patch)?;
    if let Some(trace) = trace {
        trace.push(IssmTrace {
            matching: matching
                .pairs
                .iter()
                .zip(&matching.scores)
                .map(|(&(i, j), &s)| (i, j, s.to_f64()))
                .collect(),
            depth_leads,
        });
    }

    let stacked = tape.concat_ch(lead, follow)?;
    let l = layout.len();
    let flat = tape.reshape(stacked, &[2 * inner * h * w])?;
    let tokens = tape.gather_flat(flat, layout.perm.clone(), &[l, 1])?;
    let scanned = tape.s6_scan(tokens, &p.s6)?;
    let scanned_flat = tape.reshape(scanned, &[l])?;
    let restored = tape.gather_flat(scanned_flat, layout.inv.clone(), &[2 * inner, h, w])?;
    let g_lead = tape.slice_ch(restored, 0, inner)?;
    let g_follow = tape.slice_ch(restored, inner, inner)?;
    let (g_d, g_r) = if depth_leads { (g_lead, g_follow) } else { (g_follow, g_lead) };

    let gate_d = gate_rows(tape, f_depth, &p.depth)?;
    let gate_r = gate_rows(tape, f_rgb, &p.rgb)?;
    let out_d = project_out(tape, g_d, gate_d, &p.depth, h, w)?;
    let out_r = project_out(tape, g_r, gate_r, &p.rgb, h, w)?;
    Ok((out_d, out_r))
}
