//! Shared RNG helpers.

use rand::Rng;

use crate::tensor::Tensor;

/// One standard-normal draw via Box-Muller.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn randn<R: Rng>(rng: &mut R, shape: Vec<usize>, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| scale * standard_normal(rng)).collect();
    Tensor::new(shape, data).expect("shape/data consistent by construction")
}
