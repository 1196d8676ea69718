//! Seeded initialization. Every random value in the crate flows through a
//! `ChaCha8Rng` so runs are reproducible from a single `u64` seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ops::ConvParams;
use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn standard_normal<R: Rng>(shape: [usize; 4], rng: &mut R) -> Tensor {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("shape/data agree by construction")
}

/// Uniform in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
pub fn uniform_fan_in<R: Rng>(shape: [usize; 4], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_vec(shape, data).expect("shape/data agree by construction")
}

pub fn conv_params<R: Rng>(
    c_out: usize,
    c_in: usize,
    k: usize,
    with_bias: bool,
    rng: &mut R,
) -> ConvParams {
    let fan_in = c_in * k * k;
    let weight = uniform_fan_in([c_out, c_in, k, k], fan_in, rng);
    let bias = with_bias.then(|| uniform_fan_in([1, c_out, 1, 1], fan_in, rng));
    ConvParams::new(weight, bias).expect("valid kernel by construction")
}
