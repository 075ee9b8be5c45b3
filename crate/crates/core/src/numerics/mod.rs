//! Dense tensor kernels and seeded randomness.

mod rng;
mod tensor;

pub use rng::{seeded_normal, Rng};
pub use tensor::{mean_abs_sum, Elementwise, Tensor};
