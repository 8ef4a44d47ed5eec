//! Parameter initialization. Kaiming-uniform fan-in for weights, zeros for
//! biases, ones/zeros for layer-norm affine.

use super::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Seeded RNG used everywhere determinism matters.
pub type Rng64 = ChaCha8Rng;

pub fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng64) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)))
}

pub fn uniform<T: Scalar>(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(lo..hi)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn kaiming_bound_respected() {
        let mut rng = Rng64::seed_from_u64(7);
        let t: Tensor<f32> = kaiming_uniform(&[64, 9], 9, &mut rng);
        let bound = (6.0f32 / 9.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        // same seed, same tensor
        let mut rng2 = Rng64::seed_from_u64(7);
        let t2: Tensor<f32> = kaiming_uniform(&[64, 9], 9, &mut rng2);
        assert_eq!(t.data(), t2.data());
    }
}
