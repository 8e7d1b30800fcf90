use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::scalar::Scalar;

/// `√(6 / (fan_in + fan_out))` for a weight of the given shape.
///
/// Matrices use `(rows, cols)` as `(fan_in, fan_out)`; vectors use
/// `(len, 1)`.
pub fn xavier_bound(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = match shape {
        [] => (1, 1),
        [n] => (*n, 1),
        [r, c] => (*r, *c),
        [r, rest @ ..] => (*r, rest.iter().product()),
    };
    (6.0 / (fan_in + fan_out).max(1) as f64).sqrt()
}

/// Xavier-uniform tensor, deterministic in `(shape, seed)`.
pub fn xavier_init<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let bound = xavier_bound(shape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| T::lit(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Mix a run seed with a parameter name (FNV-1a) so each parameter draws an
/// independent stream regardless of registration order.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let a = xavier_init::<f64>(&[7, 5], 42);
        let b = xavier_init::<f64>(&[7, 5], 42);
        assert_eq!(a.data(), b.data());
        let c = xavier_init::<f64>(&[7, 5], 43);
        assert_ne!(a.data(), c.data());
        let bound = (6.0f64 / 12.0).sqrt();
        assert!(a.data().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn sample_mean_near_zero() {
        let t = xavier_init::<f64>(&[100, 100], 7);
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        assert!(mean.abs() <= 0.02, "{mean}");
    }

    #[test]
    fn seeds_differ_per_name() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
        assert_eq!(
            derive_seed(9, "encoder.0.wq"),
            derive_seed(9, "encoder.0.wq")
        );
    }
}
