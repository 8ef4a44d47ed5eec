//! Parameterized layer wrappers: each owns tape-resident parameter ids and
//! registers them under a dotted name for checkpointing.

use crate::error::Result;
use crate::numerics::init::{kaiming_uniform, Rng64};
use crate::numerics::tape::{Tape, VarId};
use crate::numerics::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-6;

/// Name -> parameter id table, in registration order. Checkpoints and the
/// optimizer both walk this.
#[derive(Debug, Default)]
pub struct ParamRegistry {
    entries: Vec<(String, VarId)>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, id: VarId) {
        let name = name.into();
        debug_assert!(!self.entries.iter().any(|(n, _)| *n == name), "duplicate parameter {name}");
        self.entries.push((name, id));
    }

    pub fn entries(&self) -> &[(String, VarId)] {
        &self.entries
    }

    pub fn ids(&self) -> Vec<VarId> {
        self.entries.iter().map(|&(_, id)| id).collect()
    }

    pub fn find(&self, name: &str) -> Option<VarId> {
        self.entries.iter().find(|(n, _)| n == name).map(|&(_, id)| id)
    }

    pub fn num_scalars<T: Scalar>(&self, tape: &Tape<T>) -> usize {
        self.entries.iter().map(|&(_, id)| tape.value(id).numel()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2dLayer {
    pub w: VarId,
    pub b: VarId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new<T: Scalar>(
        tape: &mut Tape<T>,
        reg: &mut ParamRegistry,
        name: &str,
        cin: usize,
        cout: usize,
        ksize: usize,
        stride: usize,
        rng: &mut Rng64,
    ) -> Self {
        let w = tape.param(kaiming_uniform(&[cout, cin, ksize, ksize], cin * ksize * ksize, rng));
        let b = tape.param(Tensor::zeros(&[cout]));
        reg.add(format!("{name}.w"), w);
        reg.add(format!("{name}.b"), b);
        Self { w, b, stride, pad: ksize / 2 }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: VarId) -> Result<VarId> {
        tape.conv2d(x, self.w, Some(self.b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DwConv2dLayer {
    pub w: VarId,
    pub b: VarId,
    pub pad: usize,
}

impl DwConv2dLayer {
    pub fn new<T: Scalar>(
        tape: &mut Tape<T>,
        reg: &mut ParamRegistry,
        name: &str,
        c: usize,
        ksize: usize,
        rng: &mut Rng64,
    ) -> Self {
        let w = tape.param(kaiming_uniform(&[c, 1, ksize, ksize], ksize * ksize, rng));
        let b = tape.param(Tensor::zeros(&[c]));
        reg.add(format!("{name}.w"), w);
        reg.add(format!("{name}.b"), b);
        Self { w, b, pad: ksize / 2 }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: VarId) -> Result<VarId> {
        tape.dwconv2d(x, self.w, Some(self.b), self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearLayer {
    pub w: VarId,
    pub b: VarId,
}

impl LinearLayer {
    pub fn new<T: Scalar>(
        tape: &mut Tape<T>,
        reg: &mut ParamRegistry,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut Rng64,
    ) -> Self {
        let w = tape.param(kaiming_uniform(&[cout, cin], cin, rng));
        let b = tape.param(Tensor::zeros(&[cout]));
        reg.add(format!("{name}.w"), w);
        reg.add(format!("{name}.b"), b);
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: VarId) -> Result<VarId> {
        tape.linear(x, self.w, self.b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormLayer {
    pub gamma: VarId,
    pub beta: VarId,
}

impl LayerNormLayer {
    pub fn new<T: Scalar>(tape: &mut Tape<T>, reg: &mut ParamRegistry, name: &str, c: usize) -> Self {
        let gamma = tape.param(Tensor::full(&[c], T::one()));
        let beta = tape.param(Tensor::zeros(&[c]));
        reg.add(format!("{name}.gamma"), gamma);
        reg.add(format!("{name}.beta"), beta);
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: VarId) -> Result<VarId> {
        tape.layer_norm(x, self.gamma, self.beta, T::from_f64(LN_EPS))
    }
}

/// Two 3x3 convs with a SiLU between, plus the identity skip. The stand-in
/// used by ablation rows that disable a module.
#[derive(Debug, Clone, Copy)]
pub struct ResBlock {
    pub c1: Conv2dLayer,
    pub c2: Conv2dLayer,
}

impl ResBlock {
    pub fn new<T: Scalar>(tape: &mut Tape<T>, reg: &mut ParamRegistry, name: &str, c: usize, rng: &mut Rng64) -> Self {
        Self {
            c1: Conv2dLayer::new(tape, reg, &format!("{name}.conv1"), c, c, 3, 1, rng),
            c2: Conv2dLayer::new(tape, reg, &format!("{name}.conv2"), c, c, 3, 1, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: VarId) -> Result<VarId> {
        let a = self.c1.forward(tape, x)?;
        let a = tape.silu(a)?;
        let a = self.c2.forward(tape, a)?;
        tape.add(x, a)
    }
}

/// [C, H, W] -> [H*W, C] view for channel-axis norm/linear work.
pub fn to_rows<T: Scalar>(tape: &mut Tape<T>, x: VarId) -> Result<VarId> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0], s[1] * s[2]])?;
    tape.transpose2(flat)
}

/// [H*W, C] -> [C, H, W].
pub fn to_map<T: Scalar>(tape: &mut Tape<T>, x: VarId, h: usize, w: usize) -> Result<VarId> {
    let t = tape.transpose2(x)?;
    let c = tape.shape(t)[0];
    tape.reshape(t, &[c, h, w])
}
