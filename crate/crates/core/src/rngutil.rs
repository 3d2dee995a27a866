//! Deterministic random draws shared by the model and the data pipeline.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::{sc, Scalar};

/// One standard normal draw via Box-Muller; two uniforms per call so the
/// stream position is input-independent.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Array of standard normal draws in row-major order.
pub fn normal_array<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<S> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || sc::<S>(standard_normal(rng)))
}
