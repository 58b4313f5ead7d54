use rand::Rng;
use rand_chacha::ChaCha8Rng;
use teddn_autograd::{Float, Tensor};

/// Uniform on `[-bound, bound]`.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: Float) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let u: f64 = rng.random_range(-1.0..=1.0);
        (u as Float) * bound
    })
}

/// Uniform with bound `1/sqrt(fan_in)`.
pub fn fan_in(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan = shape.first().copied().unwrap_or(1).max(1);
    uniform(rng, shape, 1.0 / (fan as Float).sqrt())
}
