//! Adam with bias correction.

use super::tape::{Gradients, Tape, VarId};
use super::tensor::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First/second moment buffers for one parameter set, plus the step counter.
pub struct AdamState<T: Scalar> {
    cfg: AdamConfig,
    step: u64,
    moments: Vec<(VarId, Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamState<T> {
    /// Moment buffers start at zero and mirror the parameter shapes.
    pub fn new(cfg: AdamConfig, params: &[VarId], tape: &Tape<T>) -> Self {
        let moments = params
            .iter()
            .map(|&id| {
                let n = tape.value(id).numel();
                (id, vec![T::zero(); n], vec![T::zero(); n])
            })
            .collect();
        Self { cfg, step: 0, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over every tracked parameter. Parameters with no
    /// gradient entry (unused in this step's graph) are left untouched.
    pub fn step(&mut self, tape: &mut Tape<T>, grads: &Gradients<T>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let lr = T::from_f64(self.cfg.lr);
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let eps = T::from_f64(self.cfg.eps);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        for (id, m, v) in &mut self.moments {
            let Some(g) = grads.get(*id) else { continue };
            if g.len() != m.len() {
                return Err(Error::ShapeMismatch { context: "adam_step", expected: vec![m.len()], got: vec![g.len()] });
            }
            let p = tape.leaf_data_mut(*id);
            update_slice(p, g, m, v, lr, b1, b2, eps, bc1, bc2)?;
        }
        Ok(())
    }
}

/// Core update on raw slices; shared by the tape-level optimizer and tests.
#[allow(clippy::too_many_arguments)]
pub fn update_slice<T: Scalar>(
    p: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    lr: T,
    b1: T,
    b2: T,
    eps: T,
    bias1: T,
    bias2: T,
) -> Result<()> {
    if p.len() != g.len() || p.len() != m.len() || p.len() != v.len() {
        return Err(Error::ShapeMismatch { context: "adam_update", expected: vec![p.len()], got: vec![g.len()] });
    }
    let one = T::one();
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        let mhat = m[i] / bias1;
        let vhat = v[i] / bias2;
        p[i] -= lr * mhat / (vhat.sqrt() + eps);
        if !p[i].is_finite() {
            return Err(Error::NonFinite { context: "adam_update" });
        }
    }
    Ok(())
}

/// Standalone single-tensor convenience used by tests and examples.
pub struct SimpleAdam<T: Scalar> {
    cfg: AdamConfig,
    step: u64,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> SimpleAdam<T> {
    pub fn new(cfg: AdamConfig, n: usize) -> Self {
        Self { cfg, step: 0, m: vec![T::zero(); n], v: vec![T::zero(); n] }
    }

    pub fn step(&mut self, p: &mut [T], g: &[T]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        update_slice(
            p,
            g,
            &mut self.m,
            &mut self.v,
            T::from_f64(self.cfg.lr),
            b1,
            b2,
            T::from_f64(self.cfg.eps),
            T::one() - b1.powi(t),
            T::one() - b2.powi(t),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut opt = SimpleAdam::<f64>::new(AdamConfig::default(), 3);
        let mut p = vec![1.0, -2.0, 0.5];
        let before = p.clone();
        opt.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_sign() {
        // bias-corrected first step: delta = lr * g / (|g| + eps)
        let cfg = AdamConfig::with_lr(1e-2);
        let mut opt = SimpleAdam::<f64>::new(cfg, 2);
        let mut p = vec![0.0, 0.0];
        opt.step(&mut p, &[3.0, -0.25]).unwrap();
        assert!((p[0] + 1e-2).abs() < 1e-6, "got {}", p[0]);
        assert!((p[1] - 1e-2).abs() < 1e-6, "got {}", p[1]);
    }

    #[test]
    fn quadratic_descends_monotonically() {
        // f(w) = w^2 from w = 1
        let mut opt = SimpleAdam::<f64>::new(AdamConfig::with_lr(0.1), 1);
        let mut w = vec![1.0];
        let mut last = w[0] * w[0];
        for _ in 0..3 {
            let g = [2.0 * w[0]];
            opt.step(&mut w, &g).unwrap();
            let f = w[0] * w[0];
            assert!(f < last, "f did not decrease: {f} >= {last}");
            last = f;
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut opt = SimpleAdam::<f64>::new(AdamConfig::default(), 2);
        let mut p = vec![0.0, 0.0];
        assert!(opt.step(&mut p, &[1.0]).is_err());
    }
}
