use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::scalar::Scalar;

/// `(fan_in, fan_out)` for a weight shape.
///
/// Conv weights are `[out, in, kh, kw]`, linear weights `[in, out]`.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [fan_in, fan_out] => (*fan_in, *fan_out),
        [out, inp, rest @ ..] => {
            let field: usize = rest.iter().product();
            (inp * field, out * field)
        }
    }
}

pub fn xavier_bound(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = fans(shape);
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Xavier/Glorot uniform initialisation drawn from `rng`.
pub fn xavier_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let bound = xavier_bound(shape);
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.random_range(-bound..=bound)))
        .with_requires_grad(true)
}

/// Xavier uniform initialisation from a fixed seed.
pub fn xavier_init<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    xavier_uniform(shape, &mut rng)
}
