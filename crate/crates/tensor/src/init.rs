use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// He (Kaiming) normal initialization: `N(0, 2 / fan_in)`.
pub fn he_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(TensorError::invalid("he_init", "fan_in must be at least 1"));
    }
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
        .map_err(|e| TensorError::invalid("he_init", e.to_string()))?;
    Tensor::from_fn(shape, |_| T::of_f64(normal.sample(rng)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn variance_matches_two_over_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t: Tensor<f64> = he_normal(&[100_000], 2, &mut rng).unwrap();
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 0.05, "variance {var}");

        let t8: Tensor<f64> = he_normal(&[100_000], 8, &mut rng).unwrap();
        let sd = (t8.data().iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        assert!((sd - 0.5).abs() < 0.01, "std {sd}");
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let a: Tensor<f32> = he_normal(&[4, 3, 3], 27, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b: Tensor<f32> = he_normal(&[4, 3, 3], 27, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(he_normal::<f32, _>(&[2], 0, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
    }
}
