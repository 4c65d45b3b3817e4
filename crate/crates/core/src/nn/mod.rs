//! Minimal reverse-mode automatic differentiation with the primitives the
//! learned codec needs: same-length 1-D convolution, position-wise linear
//! layers, ELU/sigmoid, block normalization, straight-through sign and
//! binary cross-entropy.

mod kernels;
pub mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use optim::{Adam, AdamConfig, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, NormMode, Tape, Var, BCE_CLAMP, MIN_POOL_STD};
pub use tensor::{DType, Real, Tensor};

use crate::blocks::Rng;

/// Uniform initialization in `+-sqrt(1 / fan_in)`.
pub fn init_uniform<T: Real>(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.uniform_range(-bound, bound))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}
