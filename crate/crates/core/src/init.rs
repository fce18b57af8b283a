//! Parameter initialization helpers. Projection matrices use uniform fan-in
//! scaling; vector banks and embeddings use small normal noise.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::tensor::Param;

/// Uniform in ±1/√fan_in, the conventional scale for d×d projections.
pub fn uniform_fan_in(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Param {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Param::new(vec![rows, cols], data).expect("shape/data agree by construction")
}

/// Gaussian with the given std (Box-Muller; two uniforms per sample).
pub fn normal(rng: &mut ChaCha12Rng, shape: Vec<usize>, std: f64) -> Param {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Param::new(shape, data).expect("shape/data agree by construction")
}

pub fn zeros(shape: Vec<usize>) -> Param {
    let numel: usize = shape.iter().product();
    Param::new(shape, vec![0.0; numel]).expect("shape/data agree by construction")
}

pub fn ones(shape: Vec<usize>) -> Param {
    let numel: usize = shape.iter().product();
    Param::new(shape, vec![1.0; numel]).expect("shape/data agree by construction")
}
